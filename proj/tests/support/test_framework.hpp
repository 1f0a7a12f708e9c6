#pragma once

// libtorch exports a CHECK macro of its own; doctest's assertion macros win here.
#ifdef CHECK
#undef CHECK
#endif
#include "doctest.h"
