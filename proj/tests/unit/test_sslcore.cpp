#include "test_framework.hpp"

#include <cmath>
#include <deque>

#include "cassle/sslcore.hpp"
#include "support.hpp"

using namespace cassle;
using namespace cassle::ssl;
using testing::to_matrix;

namespace {

torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::randn(shape, gen, torch::kFloat64);
}

torch::Tensor unit(const torch::Tensor& x) { return x / x.norm(2, 1, true); }

torch::Tensor standardize(const torch::Tensor& x) {
  return (x - x.mean(0, true)) / x.std(0, false, true);
}

ModelSpec tiny_spec(Method method) {
  ModelSpec spec;
  spec.backbone.widths = {4, 4, 8, 8};
  spec.conditioning.mode = cond::ConditioningMode::concat;
  spec.conditioning.gamma_depth = 2;
  spec.conditioning.gamma_hidden = 8;
  spec.conditioning.gamma_out = 4;
  spec.conditioning.projector_depth = 2;
  spec.conditioning.projector_hidden = 8;
  spec.conditioning.projector_out = 6;
  spec.method = MethodConfig::defaults(method);
  spec.method.queue_size = 8;
  spec.method.predictor_hidden = 8;
  return spec;
}

ViewBatch tiny_batch(int64_t n, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  ViewBatch b;
  b.view1 = torch::rand({n, 3, 8, 8}, gen);
  b.view2 = torch::rand({n, 3, 8, 8}, gen);
  b.omega1 = torch::rand({n, 14}, gen);
  b.omega2 = torch::rand({n, 14}, gen);
  return b;
}

}  // namespace

TEST_SUITE("sslcore") {
  TEST_CASE("info_nce examples") {
    const auto q = testing::random_unit_rows(3, 5, 1);
    CHECK(info_nce(q, q, torch::zeros({0, 5}, torch::kFloat64), 0.5).item<double>() == doctest::Approx(0.0));

    const auto e = torch::eye(3, torch::kFloat64);
    const auto loss = info_nce(e.slice(0, 0, 1), e.slice(0, 0, 1), e.slice(0, 1, 3), 1.0).item<double>();
    CHECK(loss == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 2.0))).epsilon(1e-12));

    CHECK_THROWS_AS(info_nce(q * 2, q, q, 0.5), SslError);
    CHECK_THROWS_AS(info_nce(q, q, q, 0.0), SslError);
  }

  TEST_CASE("loss oracles on small batches") {
    for (int64_t n : {2, 4, 8}) {
      CAPTURE(n);
      const auto q = testing::random_unit_rows(n, 6, 10 + n);
      const auto k = testing::random_unit_rows(n, 6, 20 + n);
      const auto neg = testing::random_unit_rows(7, 6, 30 + n);
      for (double tau : {0.1, 0.2, 0.5, 1.0}) {
        CHECK(std::abs(info_nce(q, k, neg, tau).item<double>() -
                       testing::oracle_info_nce(to_matrix(q), to_matrix(k), to_matrix(neg), tau)) < 1e-6);
        CHECK(std::abs(nt_xent(q, k, tau).item<double>() -
                       testing::oracle_nt_xent(to_matrix(q), to_matrix(k), tau)) < 1e-6);
        const auto sim = q.matmul(k.t());
        CHECK(std::abs(info_nce_diagonal(sim, tau).item<double>() -
                       testing::oracle_info_nce_diagonal(to_matrix(sim), tau)) < 1e-6);
      }
      const auto z1 = standardize(randn({n, 5}, 40 + n));
      const auto z2 = standardize(randn({n, 5}, 50 + n));
      for (double lambda : {0.0, 0.0051, 1.0}) {
        CHECK(std::abs(barlow_twins_loss(z1, z2, lambda).item<double>() -
                       testing::oracle_barlow_twins(to_matrix(z1), to_matrix(z2), lambda)) < 1e-6);
      }
      const auto p1 = randn({n, 5}, 60 + n), p2 = randn({n, 5}, 70 + n);
      const auto y1 = randn({n, 5}, 80 + n), y2 = randn({n, 5}, 90 + n);
      CHECK(std::abs(simsiam_loss(p1, y2, p2, y1).item<double>() -
                     testing::oracle_simsiam(to_matrix(p1), to_matrix(y2), to_matrix(p2), to_matrix(y1))) < 1e-6);
    }
  }

  TEST_CASE("nt_xent limits") {
    const auto e = torch::eye(8, torch::kFloat64);
    const auto aligned = nt_xent(e.slice(0, 0, 4), e.slice(0, 0, 4), 0.5).item<double>();
    const auto same = torch::ones({4, 8}, torch::kFloat64) / std::sqrt(8.0);
    const auto collapsed = nt_xent(same, same, 0.5).item<double>();
    CHECK(collapsed > aligned);
    CHECK(collapsed == doctest::Approx(std::log(7.0)));

    const auto z1 = testing::random_unit_rows(5, 4, 3);
    const auto z2 = testing::random_unit_rows(5, 4, 4);
    CHECK(nt_xent(z1, z2, 1e9).item<double>() == doctest::Approx(std::log(9.0)).epsilon(1e-6));
    CHECK_THROWS_AS(nt_xent(z1.slice(0, 0, 1), z2.slice(0, 0, 1), 0.5), SslError);
  }

  TEST_CASE("barlow twins examples") {
    const auto z = torch::tensor({1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0}, torch::kFloat64).view({4, 2});
    CHECK(barlow_twins_loss(z, z, 0.5).item<double>() == doctest::Approx(0.0));

    const auto a = standardize(randn({3, 3}, 5));
    const auto b = standardize(randn({3, 3}, 6));
    double diag = 0;
    const auto ma = to_matrix(a), mb = to_matrix(b);
    for (int d = 0; d < 3; ++d) {
      double c = 0;
      for (int i = 0; i < 3; ++i) c += ma[i][d] * mb[i][d];
      diag += (1 - c / 3) * (1 - c / 3);
    }
    CHECK(barlow_twins_loss(a, b, 0.0).item<double>() == doctest::Approx(diag).epsilon(1e-12));

    const double l0 = barlow_twins_loss(a, b, 0.0).item<double>();
    const double l1 = barlow_twins_loss(a, b, 0.3).item<double>();
    const double l2 = barlow_twins_loss(a, b, 0.6).item<double>();
    CHECK((l2 - l0) == doctest::Approx(2 * (l1 - l0)).epsilon(1e-12));
    CHECK_THROWS_AS(barlow_twins_loss(a.slice(0, 0, 1), b.slice(0, 0, 1), 0.1), SslError);
  }

  TEST_CASE("simsiam examples") {
    const auto p = randn({4, 3}, 7);
    CHECK(simsiam_loss(p, p, p, p).item<double>() == doctest::Approx(-1.0));
    const auto x = torch::tensor({1.0, 0.0, 1.0, 0.0}, torch::kFloat64).view({2, 2});
    const auto y = torch::tensor({0.0, 1.0, 0.0, 1.0}, torch::kFloat64).view({2, 2});
    CHECK(simsiam_loss(x, y, x, y).item<double>() == doctest::Approx(0.0));
    CHECK_THROWS_AS(simsiam_loss(x, torch::zeros({2, 2}, torch::kFloat64), x, y), SslError);
  }

  TEST_CASE("simsiam stops gradients on the target branches") {
    auto p1 = randn({4, 3}, 8).requires_grad_(true);
    auto p2 = randn({4, 3}, 9).requires_grad_(true);
    auto z1 = randn({4, 3}, 10).requires_grad_(true);
    auto z2 = randn({4, 3}, 11).requires_grad_(true);
    simsiam_loss(p1, z2, p2, z1).backward();
    CHECK(p1.grad().abs().sum().item<double>() > 0);
    CHECK((!z1.grad().defined() || z1.grad().abs().sum().item<double>() == 0.0));
    CHECK((!z2.grad().defined() || z2.grad().abs().sum().item<double>() == 0.0));
  }

  TEST_CASE("loss gradients match finite differences") {
    auto a = randn({6, 5}, 12).requires_grad_(true);
    auto b = randn({6, 5}, 13).requires_grad_(true);
    auto c = randn({9, 5}, 14).requires_grad_(true);
    auto d = randn({6, 5}, 15).requires_grad_(true);

    SUBCASE("info_nce") {
      auto f = [&] { return info_nce(unit(a), unit(b), unit(c), 0.2); };
      CHECK(testing::check_gradients(f, {a, b, c}, 20, 1).max_rel_error < 1e-4);
    }
    SUBCASE("info_nce_diagonal") {
      auto f = [&] { return info_nce_diagonal(unit(a).matmul(unit(b).t()), 0.2); };
      CHECK(testing::check_gradients(f, {a, b}, 20, 2).max_rel_error < 1e-4);
    }
    SUBCASE("nt_xent") {
      auto f = [&] { return nt_xent(unit(a), unit(b), 0.5); };
      CHECK(testing::check_gradients(f, {a, b}, 20, 3).max_rel_error < 1e-4);
    }
    SUBCASE("barlow_twins") {
      auto f = [&] { return barlow_twins_loss(a, b, 0.0051); };
      CHECK(testing::check_gradients(f, {a, b}, 20, 4).max_rel_error < 1e-4);
    }
    SUBCASE("simsiam") {
      const auto z1 = randn({6, 5}, 16), z2 = randn({6, 5}, 17);
      auto f = [&] { return simsiam_loss(a, z2, d, z1); };
      CHECK(testing::check_gradients(f, {a, d}, 20, 5).max_rel_error < 1e-4);
    }
  }

  TEST_CASE("losses are permutation equivariant and bounded") {
    const auto z1 = testing::random_unit_rows(6, 4, 21);
    const auto z2 = testing::random_unit_rows(6, 4, 22);
    const auto neg = testing::random_unit_rows(5, 4, 23);
    const auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
    const auto p1 = z1.index_select(0, perm), p2 = z2.index_select(0, perm);
    CHECK(std::abs((nt_xent(z1, z2, 0.3) - nt_xent(p1, p2, 0.3)).item<double>()) < 1e-6);
    CHECK(std::abs((info_nce(z1, z2, neg, 0.3) - info_nce(p1, p2, neg, 0.3)).item<double>()) < 1e-6);
    const auto s1 = standardize(z1), s2 = standardize(z2);
    CHECK(std::abs((barlow_twins_loss(s1, s2, 0.1) -
                    barlow_twins_loss(s1.index_select(0, perm), s2.index_select(0, perm), 0.1))
                       .item<double>()) < 1e-6);
    CHECK(std::abs((simsiam_loss(z1, z2, z2, z1) - simsiam_loss(p1, p2, p2, p1)).item<double>()) < 1e-6);

    CHECK(nt_xent(z1, z2, 0.3).item<double>() >= 0);
    CHECK(info_nce(z1, z2, neg, 0.3).item<double>() >= 0);
    CHECK(barlow_twins_loss(s1, s2, 0.1).item<double>() >= 0);
    const double s = simsiam_loss(z1, z2, z2, z1).item<double>();
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }

  TEST_CASE("momentum update endpoints") {
    const auto online = std::vector<torch::Tensor>{randn({3, 4}, 1), randn({5}, 2)};
    auto target = std::vector<torch::Tensor>{randn({3, 4}, 3), randn({5}, 4)};
    const auto before = std::vector<torch::Tensor>{target[0].clone(), target[1].clone()};
    momentum_update(online, target, 1.0);
    CHECK(torch::equal(target[0], before[0]));
    CHECK(torch::equal(target[1], before[1]));
    momentum_update(online, target, 0.0);
    CHECK(torch::equal(target[0], online[0]));
    CHECK(torch::equal(target[1], online[1]));

    auto t = std::vector<torch::Tensor>{torch::zeros({1}, torch::kFloat64)};
    momentum_update({torch::ones({1}, torch::kFloat64)}, t, 0.999);
    CHECK(t[0].item<double>() == doctest::Approx(0.001).epsilon(1e-12));

    CHECK_THROWS_AS(momentum_update({randn({2}, 1)}, {randn({3}, 1)}, 0.5), SslError);
    CHECK_THROWS_AS(momentum_update(online, target, 1.5), SslError);
  }

  TEST_CASE("momentum update stays on the segment") {
    RandomStream rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const auto online = randn({20}, 100 + trial);
      auto target = std::vector<torch::Tensor>{randn({20}, 200 + trial)};
      const auto prev = target[0].clone();
      momentum_update({online}, target, rng.uniform());
      const auto lo = torch::minimum(prev, online), hi = torch::maximum(prev, online);
      CHECK((target[0] >= lo - 1e-12).all().item<bool>());
      CHECK((target[0] <= hi + 1e-12).all().item<bool>());
    }
  }

  TEST_CASE("queue holds exactly the last K keys") {
    RandomStream rng(1234);
    for (int schedule = 0; schedule < 1000; ++schedule) {
      const int64_t k = rng.uniform_int(1, 24);
      KeyQueue queue(k, 2, static_cast<uint64_t>(schedule), torch::kFloat64);
      std::deque<std::array<double, 2>> reference;
      const auto initial = queue.contents();
      for (int64_t i = 0; i < k; ++i) reference.push_back({initial[i][0].item<double>(), initial[i][1].item<double>()});
      double counter = 0;
      const int steps = static_cast<int>(rng.uniform_int(0, 12));
      for (int s = 0; s < steps; ++s) {
        const int64_t b = rng.uniform_int(1, k);
        auto keys = torch::empty({b, 2}, torch::kFloat64);
        for (int64_t i = 0; i < b; ++i) {
          keys[i][0] = ++counter;
          keys[i][1] = -counter;
          reference.push_back({counter, -counter});
          reference.pop_front();
        }
        queue.enqueue(keys);
      }
      const auto contents = queue.contents();
      REQUIRE(contents.size(0) == k);
      for (int64_t i = 0; i < k; ++i) {
        REQUIRE(contents[i][0].item<double>() == reference[static_cast<std::size_t>(i)][0]);
        REQUIRE(contents[i][1].item<double>() == reference[static_cast<std::size_t>(i)][1]);
      }
    }
  }

  TEST_CASE("queue two-step example and errors") {
    KeyQueue queue(8, 3, 1, torch::kFloat64);
    const auto b1 = randn({4, 3}, 1), b2 = randn({4, 3}, 2);
    queue.enqueue(b1);
    queue.enqueue(b2);
    CHECK(torch::equal(queue.contents(), torch::cat({b1, b2}, 0)));
    CHECK_THROWS_AS(queue.enqueue(randn({9, 3}, 3)), SslError);
    CHECK_THROWS_AS(queue.enqueue(randn({2, 4}, 3)), SslError);
  }

  TEST_CASE("feature taps") {
    torch::manual_seed(3);
    Backbone backbone(BackboneSpec{BackboneFamily::small_conv, {4, 8, 8, 16}});
    backbone->eval();
    auto gen = at::detail::createCPUGenerator(2);
    const auto x = torch::rand({5, 3, 16, 16}, gen);
    const auto e = extract_features(backbone, x, StageTag::extractor);
    CHECK(e.rows() == 5);
    CHECK(e.cols() == 16);
    CHECK(e.stage_tag == StageTag::extractor);
    CHECK_THROWS_AS(extract_features(backbone, x, StageTag::projector), SslError);

    torch::NoGradGuard no_grad;
    const auto s2 = extract_features(backbone, x, StageTag::stage2).matrix;
    const auto manual = backbone->forward_stage(1, backbone->forward_stage(0, x)).flatten(1);
    CHECK(torch::equal(s2, manual));
    const auto taps = backbone->forward_taps(x);
    CHECK(torch::equal(taps[4], backbone->forward(x)));

    const auto zero = extract_features(backbone, torch::zeros({2, 3, 16, 16}), StageTag::extractor).matrix;
    CHECK(zero.abs().max().item<float>() == 0.0f);

    const auto n = e.normalized();
    CHECK(n.l2_normalized);
    CHECK(((n.matrix.norm(2, 1) - 1).abs() < 1e-5).all().item<bool>());
  }

  TEST_CASE("resnet-like backbone shapes") {
    Backbone backbone(BackboneSpec{BackboneFamily::resnet_like, {4, 8, 8, 16}});
    backbone->eval();
    torch::NoGradGuard no_grad;
    CHECK(backbone->forward(torch::rand({2, 3, 32, 32})).sizes() == torch::IntArrayRef({2, 16}));
  }

  TEST_CASE("method config") {
    CHECK(MethodConfig::defaults(Method::simclr).temperature == 0.5);
    CHECK(MethodConfig::defaults(Method::moco_v2).temperature == 0.2);
    auto cfg = MethodConfig::defaults(Method::moco_v2);
    cfg.queue_size = 100;
    CHECK_THROWS_AS(cfg.validate(64), SslError);
    cfg.queue_size = 128;
    CHECK_NOTHROW(cfg.validate(64));
    cfg.momentum = 1.1;
    CHECK_THROWS_AS(cfg.validate(64), SslError);
    CHECK_THROWS_AS(parse_method("byol"), SslError);
  }

  TEST_CASE("moco step matches a hand-rolled step") {
    torch::manual_seed(17);
    auto spec = tiny_spec(Method::moco_v2);
    spec.method.momentum = 0.9;
    SslModel model(spec);
    model->to(torch::kFloat64);
    // Make the online and key networks differ so the EMA matters.
    {
      torch::NoGradGuard no_grad;
      for (auto& p : model->mirrored_online_parameters()) p.add_(0.01);
    }
    KeyQueue queue(8, 6, 3, torch::kFloat64);
    auto batch = tiny_batch(4, 5);
    batch.view1 = batch.view1.to(torch::kFloat64);
    batch.view2 = batch.view2.to(torch::kFloat64);
    batch.omega1 = batch.omega1.to(torch::kFloat64);
    batch.omega2 = batch.omega2.to(torch::kFloat64);

    // Reference: a copy of the model, EMA applied by hand, keys from the copy.
    SslModel ref(spec);
    ref->to(torch::kFloat64);
    {
      torch::NoGradGuard no_grad;
      auto src = model->parameters(), dst = ref->parameters();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
      auto sb = model->buffers(), db = ref->buffers();
      for (std::size_t i = 0; i < sb.size(); ++i) db[i].copy_(sb[i]);
      auto online = ref->mirrored_online_parameters();
      auto key = ref->momentum_parameters();
      for (std::size_t i = 0; i < key.size(); ++i) key[i].copy_(0.9 * key[i] + 0.1 * online[i]);
    }
    const auto queue_before = queue.contents();
    torch::Tensor q, k;
    {
      torch::NoGradGuard no_grad;
      q = unit(ref->project(batch.view1, batch.omega1));
      k = unit(ref->key_projector->forward(ref->key_backbone->forward(batch.view2), batch.omega2));
    }
    const double expected = testing::oracle_info_nce(to_matrix(q), to_matrix(k), to_matrix(queue_before),
                                                     spec.method.temperature);

    const auto result = moco_step(model, queue, batch);
    CHECK(std::abs(result.loss.item<double>() - expected) < 1e-6);
    CHECK(torch::allclose(result.keys, k, 0, 1e-9));
    CHECK(torch::equal(queue.contents(), torch::cat({queue_before.slice(0, 4), result.keys}, 0)));

    KeyQueue wrong(16, 6, 3, torch::kFloat64);
    CHECK_THROWS_AS(moco_step(model, wrong, batch), SslError);
  }

  TEST_CASE("momentum one freezes the key encoder") {
    auto spec = tiny_spec(Method::moco_v2);
    spec.method.momentum = 1.0;
    SslModel model(spec);
    KeyQueue queue(8, 6, 3);
    std::vector<torch::Tensor> before;
    for (auto& p : model->momentum_parameters()) before.push_back(p.clone());
    torch::optim::SGD opt(model->online_parameters(), torch::optim::SGDOptions(0.5));
    for (int s = 0; s < 3; ++s) {
      opt.zero_grad();
      training_loss(model, tiny_batch(4, 40 + s), &queue).backward();
      opt.step();
    }
    auto after = model->momentum_parameters();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(torch::equal(before[i], after[i]));
  }

  TEST_CASE("training loss runs for every method") {
    for (auto method : {Method::simclr, Method::moco_v2, Method::barlow_twins, Method::simsiam}) {
      CAPTURE(to_string(method));
      SslModel model(tiny_spec(method));
      KeyQueue queue(8, 6, 1);
      const auto loss = training_loss(model, tiny_batch(4, 9), &queue);
      CHECK(std::isfinite(loss.item<double>()));
      loss.backward();
    }
  }
}
