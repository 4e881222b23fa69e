#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "gfsseg/model.hpp"
#include "gfsseg/rng.hpp"

using namespace gfsseg;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.backbone_channels = {8, 12, 16};
  c.classifier_hidden = 16;
  c.num_outputs = 21;
  c.pooling_scales = {1, 2, 4};
  c.aux_tap = true;
  return c;
}

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.backbone_channels = {4, 6};
  c.classifier_hidden = 8;
  c.num_outputs = 3;
  c.pooling_scales = {1, 2};
  c.aux_tap = true;
  return c;
}

Tensor random_tensor(int n, int c, int h, int w, Rng& rng) {
  Tensor t(n, c, h, w);
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t.data[i] * w.data[i];
  return s;
}

double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

}  // namespace

TEST_CASE("build is deterministic per seed and groups partition the parameters") {
  Network a = build_network(small_config(), 7);
  Network b = build_network(small_config(), 7);
  Network c = build_network(small_config(), 8);

  auto pa = all_parameters(a), pb = all_parameters(b), pc = all_parameters(c);
  REQUIRE(pa.size() == pb.size());
  bool any_diff_c = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].value->data == pb[i].value->data);
    if (pa[i].value->data != pc[i].value->data) any_diff_c = true;
  }
  CHECK(any_diff_c);

  std::set<std::string> names;
  std::set<std::string> groups;
  std::size_t total = 0;
  for (auto& p : pa) {
    CHECK(names.insert(p.name).second);  // unique
    groups.insert(p.group);
    total += p.value->size();
  }
  CHECK(groups == std::set<std::string>{"backbone", "classifier.body", "classifier.final"});
  CHECK(total == count_parameters(a));
}

TEST_CASE("forward obeys the shape contract") {
  Network net = build_network(small_config(), 11);
  Tensor zeros(2, 3, 64, 64);
  ForwardResult r = forward(net, zeros, Mode::eval);
  CHECK(r.logits.n == 2);
  CHECK(r.logits.c == 21);
  CHECK(r.logits.h == 64);
  CHECK(r.logits.w == 64);
  CHECK(r.logits.all_finite());
  CHECK(r.penultimate.c == 16);
  CHECK(r.penultimate.h == 8);  // x8 downsampling
  CHECK(r.penultimate.w == 8);
  REQUIRE(r.has_aux);
  CHECK(r.aux_logits.same_shape(r.logits));

  // Non-square input keeps the logits at input resolution.
  Tensor tall(1, 3, 48, 64);
  ForwardResult r2 = forward(net, tall, Mode::eval);
  CHECK(r2.logits.h == 48);
  CHECK(r2.logits.w == 64);
}

TEST_CASE("eval forward is repeatable and rejects bad input") {
  Network net = build_network(small_config(), 13);
  Rng rng(5);
  Tensor x = random_tensor(2, 3, 32, 32, rng);
  ForwardResult a = forward(net, x, Mode::eval);
  ForwardResult b = forward(net, x, Mode::eval);
  CHECK(a.logits.data == b.logits.data);
  CHECK(a.penultimate.data == b.penultimate.data);

  Tensor bad = x;
  bad.data[42] = std::nan("");
  CHECK_THROWS_AS(forward(net, bad, Mode::eval), numeric_error);
}

TEST_CASE("config validation and pooling-scale bound") {
  NetworkConfig c = small_config();
  c.num_outputs = 1;
  CHECK_THROWS_AS(build_network(c, 1), config_error);

  c = small_config();
  c.pooling_scales = {};
  CHECK_THROWS_AS(build_network(c, 1), config_error);

  // 64x64 through three stride-2 blocks leaves 8x8; a scale of 9 cannot fit.
  c = small_config();
  c.pooling_scales = {1, 2, 9};
  Network net = build_network(c, 1);
  Tensor x(1, 3, 64, 64);
  CHECK_THROWS_AS(forward(net, x, Mode::eval), config_error);
}

TEST_CASE("freeze policies expose exactly the right trainable sets") {
  Network net = build_network(small_config(), 17);

  auto all = apply_freeze(net, {FreezeVariant::none});
  CHECK(all.size() == all_parameters(net).size());
  CHECK(parameter_fraction(net, {FreezeVariant::none}) == doctest::Approx(1.0));

  auto clf = apply_freeze(net, {FreezeVariant::freeze_backbone});
  std::size_t clf_count = 0, total = 0;
  for (auto& p : all_parameters(net)) {
    total += p.value->size();
    if (p.group != "backbone") clf_count += p.value->size();
  }
  std::size_t seen = 0;
  for (auto& p : clf) {
    CHECK(p.group != "backbone");
    seen += p.value->size();
  }
  CHECK(seen == clf_count);
  CHECK(parameter_fraction(net, {FreezeVariant::freeze_backbone}) ==
        doctest::Approx(static_cast<double>(clf_count) / total));

  auto last = apply_freeze(net, {FreezeVariant::freeze_all_but_last});
  REQUIRE(last.size() == 2);
  CHECK(last[0].name == "classifier.final.conv.weight");
  CHECK(last[1].name == "classifier.final.conv.bias");

  double f_last = parameter_fraction(net, {FreezeVariant::freeze_all_but_last});
  double f_clf = parameter_fraction(net, {FreezeVariant::freeze_backbone});
  CHECK(f_last < f_clf);
  CHECK(f_clf < 1.0);
  CHECK(f_last > 0.0);
}

TEST_CASE("head expansion copies old rows and keeps old logits") {
  Network net = build_network(tiny_config(), 19);
  Rng rng(77);
  Tensor x = random_tensor(1, 3, 16, 16, rng);
  ForwardResult before = forward(net, x, Mode::eval);

  Tensor old_w = net.final_conv.weight;
  Tensor old_b = net.final_conv.bias;
  expand_classifier_outputs(net, 3, 5, 123);
  CHECK(net.config.num_outputs == 5);

  for (std::size_t i = 0; i < old_w.size(); ++i)
    CHECK(net.final_conv.weight.data[i] == old_w.data[i]);
  for (std::size_t i = 0; i < old_b.size(); ++i)
    CHECK(net.final_conv.bias.data[i] == old_b.data[i]);

  ForwardResult after = forward(net, x, Mode::eval);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx)
        CHECK(after.logits.at(0, c, y, xx) == before.logits.at(0, c, y, xx));

  // Same seed, same expansion -> identical new rows.
  Network net2 = build_network(tiny_config(), 19);
  expand_classifier_outputs(net2, 3, 5, 123);
  CHECK(net2.final_conv.weight.data == net.final_conv.weight.data);
  CHECK(net2.aux_conv.weight.data == net.aux_conv.weight.data);

  CHECK_THROWS_AS(expand_classifier_outputs(net, 5, 4, 1), domain_error);
  CHECK_THROWS_AS(expand_classifier_outputs(net, 3, 7, 1), domain_error);
}

TEST_CASE("regularizer gradients reach the classifier body under freeze_backbone") {
  Network net = build_network(tiny_config(), 23);
  apply_freeze(net, {FreezeVariant::freeze_backbone});
  Rng rng(3);
  Tensor x = random_tensor(2, 3, 16, 16, rng);

  ForwardCache cache;
  ForwardResult r = forward(net, x, Mode::train, &cache);
  zero_grad(net);
  Tensor dlogits(r.logits.n, r.logits.c, r.logits.h, r.logits.w);  // zeros
  Tensor dpen = random_tensor(r.penultimate.n, r.penultimate.c, r.penultimate.h,
                              r.penultimate.w, rng);
  backward(net, cache, dlogits, &dpen, nullptr);

  double body_grad_norm = 0;
  for (auto& p : all_parameters(net))
    if (p.group == "classifier.body")
      for (double g : p.grad->data) body_grad_norm += g * g;
  CHECK(body_grad_norm > 0.0);

  // The final layer sits above the penultimate features, so it sees nothing.
  for (auto& p : all_parameters(net))
    if (p.group == "classifier.final")
      for (double g : p.grad->data) CHECK(g == 0.0);
}

TEST_CASE("whole-network gradients match finite differences") {
  Network net = build_network(tiny_config(), 29);
  for (auto& bn : net.bb_bn) bn.momentum = 0.0;  // keep the probe functional pure
  net.body_bn.momentum = 0.0;

  Rng rng(31);
  Tensor x = random_tensor(2, 3, 16, 16, rng);
  ForwardCache cache;
  ForwardResult r = forward(net, x, Mode::train, &cache);

  Tensor probe_logits = random_tensor(r.logits.n, r.logits.c, r.logits.h, r.logits.w, rng);
  Tensor probe_pen = random_tensor(r.penultimate.n, r.penultimate.c, r.penultimate.h,
                                   r.penultimate.w, rng);
  Tensor probe_aux = random_tensor(r.aux_logits.n, r.aux_logits.c, r.aux_logits.h,
                                   r.aux_logits.w, rng);

  auto scalar = [&]() {
    ForwardResult rr = forward(net, x, Mode::train);
    return weighted_sum(rr.logits, probe_logits) + weighted_sum(rr.penultimate, probe_pen) +
           weighted_sum(rr.aux_logits, probe_aux);
  };

  zero_grad(net);
  backward(net, cache, probe_logits, &probe_pen, &probe_aux);

  const double eps = 1e-5;
  int checked = 0;
  for (auto& p : all_parameters(net)) {
    // Spot-check a strided sample of each tensor to keep runtime small.
    std::size_t stride = std::max<std::size_t>(1, p.value->size() / 5);
    for (std::size_t i = 0; i < p.value->size(); i += stride) {
      double keep = p.value->data[i];
      p.value->data[i] = keep + eps;
      double up = scalar();
      p.value->data[i] = keep - eps;
      double down = scalar();
      p.value->data[i] = keep;
      double fd = (up - down) / (2 * eps);
      INFO(p.name << "[" << i << "]");
      // Conv biases feeding a train-mode batchnorm have true gradient zero
      // (the mean subtraction cancels them); relative error is meaningless
      // there, so accept agreement in absolute terms too.
      bool ok = std::fabs(fd - p.grad->data[i]) < 1e-7 ||
                rel_err(fd, p.grad->data[i]) < 5e-5;
      CHECK(ok);
      ++checked;
    }
  }
  CHECK(checked > 30);
}

TEST_CASE("checkpoints round-trip and reject mismatches") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "gfsseg_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "net.ckpt").string();

  Network net = build_network(small_config(), 37);
  Rng rng(41);
  Tensor x = random_tensor(2, 3, 32, 32, rng);
  forward(net, x, Mode::train);  // move the running statistics off their init

  save_checkpoint(net, path);
  Network loaded = load_checkpoint(path);
  CHECK(loaded.config == net.config);
  auto pa = all_parameters(net), pl = all_parameters(loaded);
  REQUIRE(pa.size() == pl.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value->data == pl[i].value->data);
  auto ba = all_buffers(net), bl = all_buffers(loaded);
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i].value->data == bl[i].value->data);

  // Same config object -> accepted; different -> rejected.
  CHECK_NOTHROW(load_checkpoint(path, small_config()));
  NetworkConfig other = small_config();
  other.classifier_hidden = 24;
  CHECK_THROWS_AS(load_checkpoint(path, other), config_error);

  std::string junk = (dir / "junk.ckpt").string();
  {
    std::ofstream out(junk, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(junk), ingestion_error);
  fs::remove_all(dir);
}
