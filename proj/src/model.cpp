#include "gfsseg/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "gfsseg/rng.hpp"
#include "json.hpp"

namespace gfsseg {

using nlohmann::json;

namespace {

void validate_config(const NetworkConfig& c) {
  if (c.num_outputs < 2) throw config_error("num_outputs must be >= 2");
  if (c.backbone_channels.size() < 2)
    throw config_error("backbone needs at least 2 blocks");
  if (c.pooling_scales.empty()) throw config_error("pooling_scales must be nonempty");
  for (int s : c.pooling_scales)
    if (s < 1) throw config_error("pooling scales must be >= 1");
  for (int ch : c.backbone_channels)
    if (ch < 1) throw config_error("backbone channels must be >= 1");
  if (c.classifier_hidden < 1) throw config_error("classifier_hidden must be >= 1");
  if (c.in_channels < 1) throw config_error("in_channels must be >= 1");
}

int pyramid_channels(const NetworkConfig& c) {
  return std::max(1, c.backbone_channels.back() /
                         static_cast<int>(c.pooling_scales.size()));
}

int concat_channels(const NetworkConfig& c) {
  return c.backbone_channels.back() +
         pyramid_channels(c) * static_cast<int>(c.pooling_scales.size());
}

int block_stride(std::size_t i) { return i < 3 ? 2 : 1; }

}  // namespace

Network build_network(const NetworkConfig& config, std::uint64_t seed) {
  validate_config(config);
  Network net;
  net.config = config;
  Rng rng(Rng::mix(seed, 0x4E4554ULL));  // network init stream

  int in_ch = config.in_channels;
  for (std::size_t i = 0; i < config.backbone_channels.size(); ++i) {
    int out_ch = config.backbone_channels[i];
    net.bb_conv.emplace_back(in_ch, out_ch, 3, block_stride(i), rng);
    net.bb_bn.emplace_back(out_ch);
    in_ch = out_ch;
  }

  int pp_ch = pyramid_channels(config);
  for (std::size_t i = 0; i < config.pooling_scales.size(); ++i)
    net.pp_conv.emplace_back(config.backbone_channels.back(), pp_ch, 1, 1, rng);

  net.body_conv = Conv2d(concat_channels(config), config.classifier_hidden, 3, 1, rng);
  net.body_bn = BatchNorm2d(config.classifier_hidden);
  net.final_conv = Conv2d(config.classifier_hidden, config.num_outputs, 1, 1, rng);

  int tap_ch = config.backbone_channels[config.backbone_channels.size() - 2];
  net.aux_conv = Conv2d(tap_ch, config.num_outputs, 1, 1, rng);
  return net;
}

bool group_frozen(const FreezePolicy& policy, const std::string& group) {
  switch (policy.variant) {
    case FreezeVariant::none:
      return false;
    case FreezeVariant::freeze_backbone:
      return group == "backbone";
    case FreezeVariant::freeze_all_but_last:
      return group != "classifier.final";
  }
  return false;
}

ForwardResult forward(Network& net, const Tensor& images, Mode mode, ForwardCache* cache) {
  if (!images.all_finite()) throw numeric_error("non-finite values in network input");
  if (images.c != net.config.in_channels)
    throw domain_error("expected " + std::to_string(net.config.in_channels) +
                       "-channel input, got " + std::to_string(images.c));

  ForwardCache local;
  ForwardCache& cc = cache ? *cache : local;
  const auto n_blocks = net.bb_conv.size();
  cc.in_h = images.h;
  cc.in_w = images.w;
  cc.bb_conv_c.assign(n_blocks, {});
  cc.bb_bn_c.assign(n_blocks, {});
  cc.bb_relu_c.assign(n_blocks, {});
  cc.pp_conv_c.assign(net.pp_conv.size(), {});

  bool bb_train = mode == Mode::train && !group_frozen(net.policy, "backbone");
  bool body_train = mode == Mode::train && !group_frozen(net.policy, "classifier.body");

  Tensor x = images;
  Tensor tap;
  for (std::size_t i = 0; i < n_blocks; ++i) {
    x = net.bb_conv[i].forward(x, cc.bb_conv_c[i]);
    x = net.bb_bn[i].forward(x, bb_train, cc.bb_bn_c[i]);
    x = relu_forward(x, cc.bb_relu_c[i]);
    if (i == n_blocks - 2) {
      tap = x;
      cc.tap_h = x.h;
      cc.tap_w = x.w;
    }
  }
  cc.feat_h = x.h;
  cc.feat_w = x.w;

  // Pyramid neck: pool to each scale, 1x1 reduce, upsample, concatenate.
  int pp_ch = net.pp_conv.empty() ? 0 : net.pp_conv[0].out_ch;
  Tensor concat(x.n, x.c + pp_ch * static_cast<int>(net.pp_conv.size()), x.h, x.w);
  for (int b = 0; b < x.n; ++b)
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) concat.at(b, c, y, xx) = x.at(b, c, y, xx);
  for (std::size_t s = 0; s < net.pp_conv.size(); ++s) {
    Tensor pooled = adaptive_avg_pool(x, net.config.pooling_scales[s]);
    Tensor reduced = net.pp_conv[s].forward(pooled, cc.pp_conv_c[s]);
    Tensor up = bilinear_resize(reduced, x.h, x.w);
    int base = x.c + static_cast<int>(s) * pp_ch;
    for (int b = 0; b < up.n; ++b)
      for (int c = 0; c < pp_ch; ++c)
        for (int y = 0; y < up.h; ++y)
          for (int xx = 0; xx < up.w; ++xx)
            concat.at(b, base + c, y, xx) = up.at(b, c, y, xx);
  }

  Tensor body = net.body_conv.forward(concat, cc.body_conv_c);
  body = net.body_bn.forward(body, body_train, cc.body_bn_c);
  Tensor penultimate = relu_forward(body, cc.body_relu_c);

  Tensor head = net.final_conv.forward(penultimate, cc.final_conv_c);

  ForwardResult result;
  result.logits = bilinear_resize(head, images.h, images.w);
  result.penultimate = std::move(penultimate);
  result.has_aux = net.config.aux_tap;
  if (result.has_aux) {
    Tensor aux = net.aux_conv.forward(tap, cc.aux_conv_c);
    result.aux_logits = bilinear_resize(aux, images.h, images.w);
  }
  if (!result.logits.all_finite()) throw numeric_error("non-finite logits");
  return result;
}

void backward(Network& net, const ForwardCache& cache, const Tensor& logits_grad,
              const Tensor* penultimate_grad, const Tensor* aux_grad) {
  Tensor d = bilinear_resize_backward(logits_grad, cache.feat_h, cache.feat_w);
  d = net.final_conv.backward(d, cache.final_conv_c);
  if (penultimate_grad) {
    if (!penultimate_grad->same_shape(d))
      throw domain_error("penultimate gradient shape " + penultimate_grad->shape_str() +
                         " does not match features " + d.shape_str());
    for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += penultimate_grad->data[i];
  }
  d = relu_backward(d, cache.body_relu_c);
  d = net.body_bn.backward(d, cache.body_bn_c);
  Tensor dconcat = net.body_conv.backward(d, cache.body_conv_c);

  // Split concat gradient back into the trunk and the pyramid branches.
  int feat_ch = net.config.backbone_channels.back();
  int pp_ch = net.pp_conv.empty() ? 0 : net.pp_conv[0].out_ch;
  Tensor dfeat(dconcat.n, feat_ch, dconcat.h, dconcat.w);
  for (int b = 0; b < dconcat.n; ++b)
    for (int c = 0; c < feat_ch; ++c)
      for (int y = 0; y < dconcat.h; ++y)
        for (int xx = 0; xx < dconcat.w; ++xx)
          dfeat.at(b, c, y, xx) = dconcat.at(b, c, y, xx);
  for (std::size_t s = 0; s < net.pp_conv.size(); ++s) {
    int scale = net.config.pooling_scales[s];
    int base = feat_ch + static_cast<int>(s) * pp_ch;
    Tensor dup(dconcat.n, pp_ch, dconcat.h, dconcat.w);
    for (int b = 0; b < dconcat.n; ++b)
      for (int c = 0; c < pp_ch; ++c)
        for (int y = 0; y < dconcat.h; ++y)
          for (int xx = 0; xx < dconcat.w; ++xx)
            dup.at(b, c, y, xx) = dconcat.at(b, base + c, y, xx);
    Tensor dreduced = bilinear_resize_backward(dup, scale, scale);
    Tensor dpooled = net.pp_conv[s].backward(dreduced, cache.pp_conv_c[s]);
    Tensor dtrunk = adaptive_avg_pool_backward(dpooled, cache.feat_h, cache.feat_w);
    for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat.data[i] += dtrunk.data[i];
  }

  Tensor dtap;
  if (aux_grad && net.config.aux_tap) {
    Tensor da = bilinear_resize_backward(*aux_grad, cache.tap_h, cache.tap_w);
    dtap = net.aux_conv.backward(da, cache.aux_conv_c);
  }

  Tensor dx = std::move(dfeat);
  for (std::size_t i = net.bb_conv.size(); i-- > 0;) {
    dx = relu_backward(dx, cache.bb_relu_c[i]);
    dx = net.bb_bn[i].backward(dx, cache.bb_bn_c[i]);
    dx = net.bb_conv[i].backward(dx, cache.bb_conv_c[i]);
    if (i >= 1 && i - 1 == net.bb_conv.size() - 2 && dtap.size() > 0)
      for (std::size_t k = 0; k < dx.size(); ++k) dx.data[k] += dtap.data[k];
  }
}

namespace {

void collect_conv(std::vector<ParamRef>& out, Conv2d& conv, const std::string& group,
                  const std::string& name) {
  out.push_back({group, name + ".weight", &conv.weight, &conv.weight_grad});
  out.push_back({group, name + ".bias", &conv.bias, &conv.bias_grad});
}

void collect_bn(std::vector<ParamRef>& out, BatchNorm2d& bn, const std::string& group,
                const std::string& name) {
  out.push_back({group, name + ".gamma", &bn.gamma, &bn.gamma_grad});
  out.push_back({group, name + ".beta", &bn.beta, &bn.beta_grad});
}

}  // namespace

std::vector<ParamRef> all_parameters(Network& net) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < net.bb_conv.size(); ++i) {
    collect_conv(out, net.bb_conv[i], "backbone", "backbone.conv" + std::to_string(i));
    collect_bn(out, net.bb_bn[i], "backbone", "backbone.bn" + std::to_string(i));
  }
  if (net.config.aux_tap)
    collect_conv(out, net.aux_conv, "backbone", "backbone.aux");
  for (std::size_t i = 0; i < net.pp_conv.size(); ++i)
    collect_conv(out, net.pp_conv[i], "classifier.body",
                 "classifier.body.pp" + std::to_string(i));
  collect_conv(out, net.body_conv, "classifier.body", "classifier.body.conv");
  collect_bn(out, net.body_bn, "classifier.body", "classifier.body.bn");
  collect_conv(out, net.final_conv, "classifier.final", "classifier.final.conv");
  return out;
}

std::vector<ParamRef> all_buffers(Network& net) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < net.bb_bn.size(); ++i) {
    std::string name = "backbone.bn" + std::to_string(i);
    out.push_back({"backbone", name + ".running_mean", &net.bb_bn[i].running_mean, nullptr});
    out.push_back({"backbone", name + ".running_var", &net.bb_bn[i].running_var, nullptr});
  }
  out.push_back({"classifier.body", "classifier.body.bn.running_mean",
                 &net.body_bn.running_mean, nullptr});
  out.push_back({"classifier.body", "classifier.body.bn.running_var",
                 &net.body_bn.running_var, nullptr});
  return out;
}

std::vector<ParamRef> trainable_parameters(Network& net) {
  std::vector<ParamRef> out;
  for (auto& p : all_parameters(net))
    if (!group_frozen(net.policy, p.group)) out.push_back(p);
  return out;
}

std::vector<ParamRef> apply_freeze(Network& net, FreezePolicy policy) {
  net.policy = policy;
  return trainable_parameters(net);
}

void zero_grad(Network& net) {
  for (auto& p : all_parameters(net)) p.grad->zero();
}

std::size_t count_parameters(const Network& net) {
  std::size_t total = 0;
  for (auto& p : all_parameters(const_cast<Network&>(net))) total += p.value->size();
  return total;
}

double parameter_fraction(Network& net, FreezePolicy policy) {
  std::size_t total = 0, trainable = 0;
  for (auto& p : all_parameters(net)) {
    total += p.value->size();
    if (!group_frozen(policy, p.group)) trainable += p.value->size();
  }
  return static_cast<double>(trainable) / static_cast<double>(total);
}

namespace {

// Copies the first old_rows output rows of a head conv, draws the rest fresh.
Conv2d expand_head(const Conv2d& old, int new_rows, Rng& rng) {
  Conv2d grown;
  grown.in_ch = old.in_ch;
  grown.out_ch = new_rows;
  grown.ksize = old.ksize;
  grown.stride = old.stride;
  grown.pad = old.pad;
  grown.weight = Tensor(new_rows, old.in_ch, old.ksize, old.ksize);
  grown.bias = Tensor::vec(new_rows);
  grown.weight_grad = Tensor(new_rows, old.in_ch, old.ksize, old.ksize);
  grown.bias_grad = Tensor::vec(new_rows);

  std::size_t row_size = static_cast<std::size_t>(old.in_ch) * old.ksize * old.ksize;
  std::copy(old.weight.data.begin(), old.weight.data.end(), grown.weight.data.begin());
  std::copy(old.bias.data.begin(), old.bias.data.end(), grown.bias.data.begin());
  double stddev = std::sqrt(2.0 / static_cast<double>(row_size));
  for (std::size_t i = static_cast<std::size_t>(old.out_ch) * row_size;
       i < grown.weight.size(); ++i)
    grown.weight.data[i] = rng.normal(0.0, stddev);
  return grown;
}

}  // namespace

void expand_classifier_outputs(Network& net, int old_classes, int new_classes,
                               std::uint64_t seed) {
  if (new_classes <= old_classes)
    throw domain_error("head expansion requires new_classes > old_classes (got " +
                       std::to_string(old_classes) + " -> " + std::to_string(new_classes) + ")");
  if (net.config.num_outputs != old_classes)
    throw domain_error("network has " + std::to_string(net.config.num_outputs) +
                       " outputs, expected " + std::to_string(old_classes));
  Rng rng(Rng::mix(seed, 0x45585044ULL));  // expansion stream
  net.final_conv = expand_head(net.final_conv, new_classes, rng);
  if (net.config.aux_tap) net.aux_conv = expand_head(net.aux_conv, new_classes, rng);
  net.config.num_outputs = new_classes;
}

namespace {

constexpr char kMagic[8] = {'G', 'F', 'S', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

json config_to_json(const NetworkConfig& c) {
  return json{{"backbone_channels", c.backbone_channels},
              {"classifier_hidden", c.classifier_hidden},
              {"num_outputs", c.num_outputs},
              {"pooling_scales", c.pooling_scales},
              {"aux_tap", c.aux_tap},
              {"in_channels", c.in_channels}};
}

NetworkConfig config_from_json(const json& j) {
  NetworkConfig c;
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.classifier_hidden = j.at("classifier_hidden").get<int>();
  c.num_outputs = j.at("num_outputs").get<int>();
  c.pooling_scales = j.at("pooling_scales").get<std::vector<int>>();
  c.aux_tap = j.at("aux_tap").get<bool>();
  c.in_channels = j.at("in_channels").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(Network& net, const std::string& path) {
  json header;
  header["config"] = config_to_json(net.config);
  header["tensors"] = json::array();

  auto params = all_parameters(net);
  auto buffers = all_buffers(net);
  std::vector<ParamRef> everything;
  everything.insert(everything.end(), params.begin(), params.end());
  everything.insert(everything.end(), buffers.begin(), buffers.end());

  std::size_t offset = 0;
  for (auto& p : everything) {
    Tensor& t = *p.value;
    header["tensors"].push_back({{"name", p.name},
                                 {"group", p.group},
                                 {"shape", {t.n, t.c, t.h, t.w}},
                                 {"offset", offset},
                                 {"count", t.size()}});
    offset += t.size();
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ingestion_error("cannot write checkpoint: " + path);
  std::string header_str = header.dump();
  std::uint64_t header_len = header_str.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (auto& p : everything)
    out.write(reinterpret_cast<const char*>(p.value->data.data()),
              static_cast<std::streamsize>(p.value->size() * sizeof(double)));
  if (!out) throw ingestion_error("short write on checkpoint: " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ingestion_error("cannot open checkpoint: " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ingestion_error("not a checkpoint file: " + path);
  if (version != kVersion)
    throw ingestion_error("unsupported checkpoint version " + std::to_string(version));
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ingestion_error("truncated checkpoint header: " + path);

  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw ingestion_error("bad checkpoint header: " + std::string(e.what()));
  }

  Network net = build_network(config_from_json(header.at("config")), 0);
  auto params = all_parameters(net);
  auto buffers = all_buffers(net);
  std::vector<ParamRef> everything;
  everything.insert(everything.end(), params.begin(), params.end());
  everything.insert(everything.end(), buffers.begin(), buffers.end());

  std::size_t cursor = 0;
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    auto it = std::find_if(everything.begin(), everything.end(),
                           [&](const ParamRef& p) { return p.name == name; });
    if (it == everything.end())
      throw config_error("checkpoint tensor " + name + " has no slot in this architecture");
    Tensor& t = *it->value;
    auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != std::vector<int>{t.n, t.c, t.h, t.w})
      throw config_error("checkpoint tensor " + name + " shape mismatch");
    if (entry.at("offset").get<std::size_t>() != cursor)
      throw ingestion_error("checkpoint tensor " + name + " offset mismatch");
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw ingestion_error("truncated checkpoint data at " + name);
    cursor += t.size();
  }
  return net;
}

Network load_checkpoint(const std::string& path, const NetworkConfig& expected) {
  Network net = load_checkpoint(path);
  if (!(net.config == expected))
    throw config_error("checkpoint config does not match the requested architecture");
  return net;
}

}  // namespace gfsseg
