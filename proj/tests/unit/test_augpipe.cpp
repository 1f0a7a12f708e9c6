#include "test_framework.hpp"

#include <cmath>

#include "cassle/augpipe.hpp"
#include "support.hpp"

using namespace cassle;
using namespace cassle::aug;

namespace {

// Closed-form inverse of the omega blocks, written independently of the library.
AugmentationRecord invert_omega(const OmegaVector& w, const AugmentationPolicy& p) {
  AugmentationRecord r;
  const auto& v = w.values;
  for (int i = 0; i < 4; ++i) r.crop[i] = v[i];
  for (int i = 0; i < 3; ++i) r.jitter[i] = 1 + (v[4 + i] - 0.5) * 2 * p.jitter_max[i];
  r.jitter[3] = (v[7] - 0.5) * 2 * p.jitter_max[3];
  r.jitter_applied = !(v[4] == 0.5 && v[5] == 0.5 && v[6] == 0.5 && v[7] == 0.5);
  r.blur_applied = v[8] > 0;
  r.blur_sigma = v[8] * p.blur_sigma.hi;
  r.flipped = v[9] == 1.0;
  r.grayscaled = v[10] == 1.0;
  for (int i = 0; i < 3; ++i) r.color_diff[i] = 2 * v[11 + i] - 1;
  return r;
}

void check_close(const AugmentationRecord& a, const AugmentationRecord& b, double tol) {
  for (int i = 0; i < 4; ++i) CHECK(std::abs(a.crop[i] - b.crop[i]) < tol);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(a.jitter[i] - b.jitter[i]) < tol);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(a.color_diff[i] - b.color_diff[i]) < tol);
  CHECK(std::abs(a.blur_sigma - b.blur_sigma) < tol);
  CHECK(a.jitter_applied == b.jitter_applied);
  CHECK(a.blur_applied == b.blur_applied);
  CHECK(a.flipped == b.flipped);
  CHECK(a.grayscaled == b.grayscaled);
}

// |count - n p| within z standard deviations of a binomial.
bool within_binomial(int count, int n, double p, double z) {
  const double sd = std::sqrt(n * p * (1 - p));
  return std::abs(count - n * p) <= z * sd;
}

}  // namespace

TEST_SUITE("augpipe") {
  TEST_CASE("identity record encodes to the constant vector") {
    const AugmentationPolicy policy;
    const auto omega = encode_omega(AugmentationRecord{}, policy);
    const std::array<double, 14> expected{0.5, 0.5, 1, 1, 0.5, 0.5, 0.5, 0.5, 0, 0, 0, 0.5, 0.5, 0.5};
    CHECK(omega.values == expected);
    CHECK(omega.layout_version == kOmegaLayoutVersion);
  }

  TEST_CASE("blur at the upper sigma encodes to one") {
    AugmentationPolicy policy;
    AugmentationRecord r;
    r.blur_applied = true;
    r.blur_sigma = policy.blur_sigma.hi;
    CHECK(encode_omega(r, policy).values[omega_block::blur] == 1.0);
    r.blur_sigma = policy.blur_sigma.lo;
    CHECK(encode_omega(r, policy).values[omega_block::blur] == doctest::Approx(0.05));
  }

  TEST_CASE("encodings of sampled records lie in the unit cube and invert") {
    const AugmentationPolicy policy;
    const auto image = testing::random_image(40, 48, 3);
    RandomStream rng(11);
    for (int i = 0; i < 500; ++i) {
      auto record = sample_record(policy, rng, image.width, image.height);
      apply_record(image, record, policy);
      REQUIRE_NOTHROW(record.validate());
      const auto omega = encode_omega(record, policy);
      for (double v : omega.values) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
      check_close(invert_omega(omega, policy), record, 1e-9);
      check_close(decode_omega(omega, policy), record, 1e-9);
    }
  }

  TEST_CASE("decode rejects another layout") {
    OmegaVector omega;
    omega.layout_version = kOmegaLayoutVersion + 1;
    CHECK_THROWS_AS(decode_omega(omega, AugmentationPolicy{}), AugmentationError);
  }

  TEST_CASE("disabled policy samples the identity record") {
    auto policy = AugmentationPolicy::identity(32);
    RandomStream rng(5);
    for (int i = 0; i < 20; ++i) CHECK(sample_record(policy, rng, 32, 32) == AugmentationRecord{});
  }

  TEST_CASE("sampling is deterministic per seed") {
    const AugmentationPolicy policy;
    RandomStream a(7), b(7);
    CHECK(sample_record(policy, a, 32, 32) == sample_record(policy, b, 32, 32));
  }

  TEST_CASE("degenerate source dims are rejected") {
    RandomStream rng(1);
    CHECK_THROWS_AS(sample_record(AugmentationPolicy{}, rng, 1, 32), AugmentationError);
    CHECK_THROWS_AS(sample_record(AugmentationPolicy{}, rng, 32, 0), AugmentationError);
  }

  TEST_CASE("application rates match policy probabilities") {
    const AugmentationPolicy policy;
    RandomStream rng(2024);
    const int n = 10000;
    int flips = 0, jitters = 0, blurs = 0, grays = 0;
    for (int i = 0; i < n; ++i) {
      const auto r = sample_record(policy, rng, 32, 32);
      flips += r.flipped;
      jitters += r.jitter_applied;
      blurs += r.blur_applied;
      grays += r.grayscaled;
    }
    // z = 2.576 is the two-sided 0.01 quantile of the normal approximation.
    CHECK(within_binomial(flips, n, policy.flip_prob, 2.576));
    CHECK(within_binomial(jitters, n, policy.jitter_prob, 2.576));
    CHECK(within_binomial(blurs, n, policy.blur_prob, 2.576));
    CHECK(within_binomial(grays, n, policy.grayscale_prob, 2.576));
  }

  TEST_CASE("sampled crops respect the scale range") {
    const AugmentationPolicy policy;
    RandomStream rng(3);
    for (int i = 0; i < 2000; ++i) {
      const auto r = sample_record(policy, rng, 32, 32);
      const double area = r.crop[2] * r.crop[3];
      CHECK(area <= 1.0 + 1e-12);
      CHECK(r.crop[0] - r.crop[2] / 2 >= -1e-12);
      CHECK(r.crop[0] + r.crop[2] / 2 <= 1 + 1e-12);
      CHECK(r.crop[1] - r.crop[3] / 2 >= -1e-12);
      CHECK(r.crop[1] + r.crop[3] / 2 <= 1 + 1e-12);
    }
  }

  TEST_CASE("replay is bit-identical") {
    const AugmentationPolicy policy;
    RandomStream rng(99);
    for (int i = 0; i < 100; ++i) {
      const auto image = testing::random_image(32 + i % 9, 32 + i % 5, 1000 + i);
      auto record = sample_record(policy, rng, image.width, image.height);
      auto copy = record;
      const auto first = apply_record(image, record, policy);
      const auto second = apply_record(image, copy, policy);
      REQUIRE(first == second);
      REQUIRE(record == copy);
    }
  }

  TEST_CASE("identity record is a pure resize") {
    const auto image = testing::random_image(224, 224, 1);
    AugmentationRecord r;
    CHECK(apply_record(image, r, AugmentationPolicy::identity(224)) == image);
    AugmentationRecord r2;
    CHECK(apply_record(image, r2, AugmentationPolicy::identity(32)) == center_crop_resize(image, 32));
  }

  TEST_CASE("flip is an involution") {
    const auto image = testing::random_image(32, 32, 8);
    auto policy = AugmentationPolicy::identity(32);
    AugmentationRecord r;
    r.flipped = true;
    const auto once = apply_record(image, r, policy);
    CHECK_FALSE(once == image);
    CHECK(apply_record(once, r, policy) == image);
  }

  TEST_CASE("color difference vanishes for hue and saturation jitter on gray") {
    const Image gray(32, 32, 3, 0.5f);
    const AugmentationPolicy policy;
    RandomStream rng(4);
    for (int i = 0; i < 50; ++i) {
      AugmentationRecord r;
      r.jitter_applied = true;
      r.jitter = {1.0, 1.0, rng.uniform(0.6, 1.4), rng.uniform(-0.1, 0.1)};
      apply_record(gray, r, policy);
      for (double d : r.color_diff) CHECK(std::abs(d) < 1e-6);
    }
  }

  TEST_CASE("color difference matches measured means") {
    const auto image = testing::random_image(32, 32, 12);
    const AugmentationPolicy policy;
    AugmentationRecord r;
    r.jitter_applied = true;
    r.jitter = {1.3, 0.8, 1.1, 0.05};
    const auto out = apply_record(image, r, policy);
    AugmentationRecord plain;
    const auto before = apply_record(image, plain, policy).channel_means();
    const auto after = out.channel_means();
    for (int c = 0; c < 3; ++c) CHECK(r.color_diff[c] == doctest::Approx(after[c] - before[c]).epsilon(1e-12));
  }

  TEST_CASE("crop outside the image is rejected") {
    const auto image = testing::random_image(32, 32, 1);
    AugmentationRecord r;
    r.crop = {0.9, 0.5, 0.5, 0.5};
    CHECK_THROWS_AS(apply_record(image, r, AugmentationPolicy{}), AugmentationError);
  }

  TEST_CASE("view pairs") {
    const auto image = testing::random_image(32, 32, 21);
    SUBCASE("disabled policy gives equal views") {
      RandomStream rng(1);
      const auto pair = make_view_pair(image, AugmentationPolicy::identity(32), rng);
      CHECK(pair.view1 == pair.view2);
    }
    SUBCASE("fixed seed reproduces the pair") {
      RandomStream a(6), b(6);
      const auto p = make_view_pair(image, AugmentationPolicy{}, a);
      const auto q = make_view_pair(image, AugmentationPolicy{}, b);
      CHECK(p.view1 == q.view1);
      CHECK(p.view2 == q.view2);
      CHECK(p.record1 == q.record1);
    }
    SUBCASE("records of a pair almost never collide") {
      RandomStream rng(77);
      const AugmentationPolicy policy;
      int distinct = 0;
      for (int i = 0; i < 1000; ++i) {
        distinct += !(sample_record(policy, rng, 32, 32) == sample_record(policy, rng, 32, 32));
      }
      CHECK(distinct > 990);
    }
  }

  TEST_CASE("single-kind sampling applies only that kind") {
    const AugmentationPolicy policy;
    RandomStream rng(31);
    CHECK(sample_single(policy, AugKind::identity, rng, 32, 32) == AugmentationRecord{});
    const auto j = sample_single(policy, AugKind::jitter, rng, 32, 32);
    CHECK(j.jitter_applied);
    CHECK_FALSE(j.blur_applied);
    CHECK(j.crop == std::array<double, 4>{0.5, 0.5, 1.0, 1.0});
    const auto b = sample_single(policy, AugKind::blur, rng, 32, 32);
    CHECK(b.blur_applied);
    CHECK_FALSE(b.jitter_applied);
    CHECK(sample_single(policy, AugKind::flip, rng, 32, 32).flipped);
    CHECK(sample_single(policy, AugKind::grayscale, rng, 32, 32).grayscaled);
  }

  TEST_CASE("rotation by four quarter turns is the identity") {
    const auto image = testing::random_image(20, 20, 2);
    CHECK(rotate90(rotate90(image, 1), 3) == image);
    CHECK(rotate90(image, 4) == image);
    CHECK_FALSE(rotate90(image, 1) == image);
  }

  TEST_CASE("record text round trip") {
    const AugmentationPolicy policy;
    RandomStream rng(8);
    const auto image = testing::random_image(32, 32, 5);
    for (int i = 0; i < 50; ++i) {
      auto r = sample_record(policy, rng, 32, 32);
      apply_record(image, r, policy);
      CHECK(parse_record(serialize_record(r)) == r);
    }
    CHECK_THROWS_AS(parse_record("crop=0.5,0.5,1,1\nbogus=1\n"), AugmentationError);
  }

  TEST_CASE("omega batch file round trip") {
    testing::TempDir dir("omega");
    const AugmentationPolicy policy;
    RandomStream rng(9);
    std::vector<OmegaVector> omegas;
    for (int i = 0; i < 10; ++i) omegas.push_back(encode_omega(sample_record(policy, rng, 32, 32), policy));
    write_omega_batch(dir / "omega.bin", omegas);
    const auto back = read_omega_batch(dir / "omega.bin");
    REQUIRE(back.size() == omegas.size());
    CHECK(std::filesystem::file_size(dir / "omega.bin") == omegas.size() * 14 * 4);
    for (std::size_t i = 0; i < back.size(); ++i) {
      for (std::size_t k = 0; k < kOmegaDim; ++k) {
        CHECK(back[i].values[k] == static_cast<double>(static_cast<float>(omegas[i].values[k])));
      }
    }
  }

  TEST_CASE("policy validation") {
    AugmentationPolicy p;
    p.flip_prob = 1.5;
    CHECK_THROWS_AS(p.validate(), AugmentationError);
    p = AugmentationPolicy{};
    p.crop_scale = {0.5, 0.2};
    CHECK_THROWS_AS(p.validate(), AugmentationError);
    CHECK_NOTHROW(AugmentationPolicy{}.validate());
  }
}
