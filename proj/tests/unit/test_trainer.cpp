#include "test_framework.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "cassle/trainer.hpp"
#include "support.hpp"

using namespace cassle;
using namespace cassle::train;
namespace fs = std::filesystem;

namespace {

std::string tiny_config_text(const fs::path& data_root, const fs::path& out, const std::string& method = "simclr") {
  return "[data]\ndataset = synthetic\nroot = " + data_root.string() +
         "\n\n[method]\nmethod = " + method +
         "\nwidths = 8,8,16,16\nqueue_size = 32\n\n"
         "[conditioning]\nmode = concat\ngamma_depth = 2\ngamma_hidden = 16\ngamma_out = 8\n"
         "projector_depth = 2\nprojector_hidden = 32\nprojector_out = 16\n\n"
         "[train]\nepochs = 2\nbatch_size = 16\nbase_lr = 0.3\nseed = 5\nworkers = 0\noutput_dir = " +
         out.string() + "\n";
}

struct Fixture {
  testing::TempDir dir{"trainer"};
  data::Dataset dataset;
  Fixture() { dataset = testing::synthetic_split(dir / "data", data::Split::train, 64, 16); }
  RunConfig config(const std::string& method = "simclr") const {
    return parse_run_config(tiny_config_text(dir / "data", dir / "runs", method));
  }
};

torch::Tensor probe_batch() {
  auto gen = at::detail::createCPUGenerator(99);
  return torch::rand({4, 3, 32, 32}, gen);
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0.4, 10, 100, 10) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(cosine_lr(0.4, 100, 100, 10) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(std::abs(cosine_lr(0.4, 55, 100, 10) - 0.2) < 1e-12);
    CHECK(cosine_lr(0.4, 0, 100, 0) == 0.4);
    CHECK(cosine_lr(0.4, 5, 100, 10) == doctest::Approx(0.2));
    CHECK_THROWS(cosine_lr(0.4, 0, 0, 0));
    double prev = cosine_lr(0.4, 10, 100, 10);
    for (int s = 11; s <= 100; ++s) {
      const double lr = cosine_lr(0.4, s, 100, 10);
      CHECK(lr <= prev);
      CHECK(lr >= 0.0);
      prev = lr;
    }
  }

  TEST_CASE("config text round trip and overrides") {
    const auto text = tiny_config_text("/data", "/out");
    const auto c = parse_run_config(text);
    CHECK(c.backbone.widths == std::array<int, 4>{8, 8, 16, 16});
    CHECK(c.method.temperature == 0.5);
    const auto canonical = to_config_text(c);
    CHECK(to_config_text(parse_run_config(canonical)) == canonical);
    CHECK(config_hash(parse_run_config(canonical)) == config_hash(c));

    const auto o = parse_run_config(text, {{"conditioning.mode", "none"}, {"train.epochs", "7"}});
    CHECK(o.conditioning.mode == cond::ConditioningMode::none);
    CHECK(o.train.epochs == 7);
    CHECK(config_hash(o) != config_hash(c));

    const auto moco = parse_run_config(text, {{"method.method", "moco-v2"}});
    CHECK(moco.method.temperature == 0.2);
  }

  TEST_CASE("config errors name the key") {
    const auto text = tiny_config_text("/data", "/out");
    try {
      parse_run_config(text + "bogus = 1\n");
      FAIL("unknown key accepted");
    } catch (const ConfigError& e) {
      CHECK(e.key() == "train.bogus");
    }
    try {
      parse_run_config(text, {{"augment.flip_prob", "1.5"}});
      FAIL("invalid probability accepted");
    } catch (const ConfigError& e) {
      CHECK(e.key().rfind("augment", 0) == 0);
    }
    CHECK_THROWS_AS(parse_run_config(text, {{"train.epochs", "zero"}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config(text, {{"method.method", "byol"}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config(text, {{"nosection", "1"}}), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/config.ini"), ConfigError);
  }

  TEST_CASE("shipped configs parse") {
    int count = 0;
    for (const auto& entry : fs::directory_iterator(CASSLE_CONFIG_DIR)) {
      if (entry.path().extension() != ".ini") continue;
      CAPTURE(entry.path().string());
      CHECK_NOTHROW(load_run_config(entry.path()));
      ++count;
    }
    CHECK(count >= 5);
    const auto vanilla = load_run_config(fs::path(CASSLE_CONFIG_DIR) / "simclr_vanilla.ini");
    const auto cassle = load_run_config(fs::path(CASSLE_CONFIG_DIR) / "simclr_cassle.ini");
    CHECK(vanilla.conditioning.mode == cond::ConditioningMode::none);
    CHECK(cassle.conditioning.mode == cond::ConditioningMode::concat);
    CHECK(vanilla.train.epochs == cassle.train.epochs);
  }

  TEST_CASE("epoch order is a seeded permutation") {
    const auto a = epoch_order(100, 3, 0);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    CHECK(a == epoch_order(100, 3, 0));
    CHECK(a != epoch_order(100, 3, 1));
    CHECK(a != epoch_order(100, 4, 0));
  }

  TEST_CASE("batches are reproducible from seed, epoch and index") {
    Fixture f;
    const auto cfg = f.config();
    const std::vector<std::size_t> idx{3, 9, 1};
    const auto a = make_batch(f.dataset, idx, cfg.augment, 5, 2);
    const auto b = make_batch(f.dataset, idx, cfg.augment, 5, 2);
    CHECK(torch::equal(a.view1, b.view1));
    CHECK(torch::equal(a.omega2, b.omega2));
    const auto c = make_batch(f.dataset, idx, cfg.augment, 5, 3);
    CHECK_FALSE(torch::equal(a.omega1, c.omega1));
    CHECK(a.view1.sizes() == torch::IntArrayRef({3, 3, 32, 32}));
    CHECK(a.omega1.sizes() == torch::IntArrayRef({3, 14}));
    CHECK(((a.omega1 >= 0) & (a.omega1 <= 1)).all().item<bool>());
  }

  TEST_CASE("one-epoch smoke run and bit-exact checkpoint reload") {
    Fixture f;
    auto cfg = f.config();
    cfg.train.epochs = 1;
    PretrainOptions opts;
    opts.run_dir = f.dir / "smoke";
    const auto result = pretrain(cfg, f.dataset, opts);
    REQUIRE(result.state.loss_history.size() == 1);
    CHECK(std::isfinite(result.state.loss_history[0]));
    CHECK(result.state.step == 4);
    CHECK(fs::exists(result.checkpoint_dir / "manifest.json"));
    CHECK(fs::exists(result.checkpoint_dir / "config.ini"));

    const auto log = read_loss_log(result.loss_log);
    REQUIRE(log.size() == 1);
    CHECK(log[0].epoch == 1);
    CHECK(log[0].mean_loss == doctest::Approx(result.state.loss_history[0]).epsilon(1e-9));

    auto a = load_checkpoint(result.checkpoint_dir);
    auto b = load_checkpoint(result.checkpoint_dir);
    CHECK(a.hash == model_hash(a.model));
    CHECK(to_config_text(a.config) == to_config_text(cfg));
    a.model->eval();
    b.model->eval();
    torch::NoGradGuard no_grad;
    const auto x = probe_batch();
    const auto omega = torch::full({4, 14}, 0.5);
    CHECK(torch::equal(a.model->project(x, omega), b.model->project(x, omega)));

    // Saving the reloaded model again reproduces the same parameters.
    save_checkpoint(f.dir / "resaved", a.config, a.state, a.model, nullptr, nullptr);
    auto c = load_checkpoint(f.dir / "resaved");
    c.model->eval();
    CHECK(c.hash == a.hash);
    CHECK(torch::equal(c.model->project(x, omega), a.model->project(x, omega)));
  }

  TEST_CASE("same seed gives the same run") {
    Fixture f;
    auto cfg = f.config();
    PretrainOptions o1, o2;
    o1.run_dir = f.dir / "r1";
    o2.run_dir = f.dir / "r2";
    cfg.train.workers = 1;
    const auto r1 = pretrain(cfg, f.dataset, o1);
    cfg.train.workers = 0;
    const auto r2 = pretrain(cfg, f.dataset, o2);
    REQUIRE(r1.state.loss_history.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::abs(r1.state.loss_history[i] - r2.state.loss_history[i]) < 1e-5);
    }
    CHECK(read_checkpoint_hash(r1.checkpoint_dir) == read_checkpoint_hash(r2.checkpoint_dir));
  }

  TEST_CASE("resume matches an uninterrupted run") {
    for (const std::string method : {"simclr", "moco-v2"}) {
      CAPTURE(method);
      Fixture f;
      auto cfg = f.config(method);
      cfg.train.epochs = 4;
      PretrainOptions full;
      full.run_dir = f.dir / "full";
      const auto straight = pretrain(cfg, f.dataset, full);

      PretrainOptions first;
      first.run_dir = f.dir / "part";
      first.stop_after_epochs = 2;
      const auto half = pretrain(cfg, f.dataset, first);
      REQUIRE(half.state.loss_history.size() == 2);

      PretrainOptions second;
      second.run_dir = f.dir / "resumed";
      second.resume_from = half.checkpoint_dir;
      const auto resumed = pretrain(cfg, f.dataset, second);
      REQUIRE(resumed.state.loss_history.size() == 4);
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(straight.state.loss_history[i] - resumed.state.loss_history[i]) < 1e-5);
      }
      CHECK(resumed.state.step == straight.state.step);
      CHECK(read_loss_log(resumed.loss_log).size() == 4);
    }
  }

  TEST_CASE("resume rejects a different config") {
    Fixture f;
    auto cfg = f.config();
    cfg.train.epochs = 1;
    PretrainOptions o;
    o.run_dir = f.dir / "a";
    const auto r = pretrain(cfg, f.dataset, o);
    auto other = cfg;
    other.train.base_lr = 0.1;
    PretrainOptions resume;
    resume.run_dir = f.dir / "b";
    resume.resume_from = r.checkpoint_dir;
    CHECK_THROWS_AS(pretrain(other, f.dataset, resume), ConfigError);
  }

  TEST_CASE("non-finite loss aborts with a snapshot") {
    Fixture f;
    auto cfg = f.config();
    auto poisoned = f.dataset;
    for (auto& img : poisoned.images) img.pixels[0] = std::numeric_limits<float>::quiet_NaN();
    PretrainOptions o;
    o.run_dir = f.dir / "nan";
    try {
      pretrain(cfg, poisoned, o);
      FAIL("training on NaN pixels did not abort");
    } catch (const TrainingAborted& e) {
      CHECK(fs::exists(e.snapshot_dir()));
      CHECK(fs::exists(e.snapshot_dir() / "manifest.json"));
    }
  }

  TEST_CASE("checkpoint manifest records conditioning and layout") {
    Fixture f;
    auto cfg = parse_run_config(tiny_config_text(f.dir / "data", f.dir / "runs"), {{"conditioning.mode", "none"}});
    cfg.train.epochs = 1;
    PretrainOptions o;
    o.run_dir = f.dir / "none";
    const auto r = pretrain(cfg, f.dataset, o);
    const auto ck = load_checkpoint(r.checkpoint_dir);
    CHECK(ck.config.conditioning.mode == cond::ConditioningMode::none);
    const auto manifest = data::read_text(r.checkpoint_dir / "manifest.json");
    CHECK(manifest.find("\"omega_layout_version\": 1") != std::string::npos);
    CHECK(manifest.find("\"none\"") != std::string::npos);
  }

  TEST_CASE("loading a tampered checkpoint fails") {
    Fixture f;
    auto cfg = f.config();
    auto model = make_model(cfg);
    save_checkpoint(f.dir / "ck", cfg, TrainState{}, model, nullptr, nullptr);
    CHECK_NOTHROW(load_checkpoint(f.dir / "ck"));
    {
      auto other = make_model(parse_run_config(tiny_config_text(f.dir / "data", f.dir / "runs"), {{"train.seed", "6"}}));
      torch::serialize::OutputArchive archive;
      other->save(archive);
      archive.save_to((f.dir / "ck" / "model.pt").string());
    }
    CHECK_THROWS(load_checkpoint(f.dir / "ck"));
    CHECK_THROWS(load_checkpoint(f.dir / "missing"));
  }
}
