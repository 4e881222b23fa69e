#include "gfsseg/loss.hpp"

#include <algorithm>
#include <cmath>

#include "gfsseg/rng.hpp"

namespace gfsseg {

double masked_cross_entropy(const Tensor& logits, const std::vector<LabelGrid>& labels,
                            int ignore_value, Tensor* grad) {
  if (static_cast<int>(labels.size()) != logits.n)
    throw domain_error("batch size mismatch between logits and labels");
  if (grad) {
    *grad = Tensor(logits.n, logits.c, logits.h, logits.w);
  }

  const int C = logits.c;
  std::vector<double> probs(static_cast<std::size_t>(C));
  double total = 0;
  std::int64_t valid = 0;

  // First pass counts valid pixels so the gradient can be scaled in one go.
  for (int b = 0; b < logits.n; ++b) {
    const LabelGrid& lab = labels[static_cast<std::size_t>(b)];
    if (lab.h != logits.h || lab.w != logits.w)
      throw domain_error("label grid " + std::to_string(b) + " does not match logits " +
                         logits.shape_str());
    for (auto v : lab.data) {
      if (v == ignore_value) continue;
      if (v < 0 || v >= C)
        throw domain_error("label " + std::to_string(v) + " outside [0," + std::to_string(C) +
                           ")");
      ++valid;
    }
  }
  if (valid == 0) return 0.0;

  for (int b = 0; b < logits.n; ++b) {
    const LabelGrid& lab = labels[static_cast<std::size_t>(b)];
    for (int y = 0; y < logits.h; ++y) {
      for (int x = 0; x < logits.w; ++x) {
        int target = lab.at(y, x);
        if (target == ignore_value) continue;
        double top = logits.at(b, 0, y, x);
        for (int c = 1; c < C; ++c) top = std::max(top, logits.at(b, c, y, x));
        double denom = 0;
        for (int c = 0; c < C; ++c) {
          probs[static_cast<std::size_t>(c)] = std::exp(logits.at(b, c, y, x) - top);
          denom += probs[static_cast<std::size_t>(c)];
        }
        total += -(logits.at(b, target, y, x) - top - std::log(denom));
        if (grad) {
          for (int c = 0; c < C; ++c) {
            double p = probs[static_cast<std::size_t>(c)] / denom;
            grad->at(b, c, y, x) = (p - (c == target ? 1.0 : 0.0)) / static_cast<double>(valid);
          }
        }
      }
    }
  }
  return total / static_cast<double>(valid);
}

double stage1_loss(double main, double aux, const LossWeights& weights) {
  return main + weights.lambda_aux * aux;
}

double stage2_loss(double main) { return main; }

double stage_loss_with_triplet(double main, std::optional<double> aux, double triplet,
                               const LossWeights& weights, Stage stage) {
  if (stage == Stage::base) {
    return main + weights.lambda_aux * aux.value_or(0.0) +
           weights.lambda_triplet_base * triplet;
  }
  // Fine-tuning composes without any auxiliary term.
  return main + weights.lambda_triplet_ft * triplet;
}

double triplet_distance(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw domain_error("feature dimension mismatch: " + std::to_string(x.size()) + " vs " +
                       std::to_string(y.size()));
  double sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

double triplet_loss(const std::vector<double>& a, const std::vector<double>& p,
                    const std::vector<double>& n, double mu) {
  return std::max(0.0, triplet_distance(a, p) - triplet_distance(a, n) + mu);
}

std::size_t TripletSet::total() const {
  std::size_t t = 0;
  for (const auto& c : per_class) t += c.triples.size();
  return t;
}

LabelGrid downsample_labels_nearest(const LabelGrid& labels, int out_h, int out_w) {
  LabelGrid out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    int sy = std::clamp(static_cast<int>(std::lround((y + 0.5) * labels.h / out_h - 0.5)), 0,
                        labels.h - 1);
    for (int x = 0; x < out_w; ++x) {
      int sx = std::clamp(static_cast<int>(std::lround((x + 0.5) * labels.w / out_w - 0.5)), 0,
                          labels.w - 1);
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

namespace {

struct PointPools {
  std::vector<int> anchors, positives, negatives;
};

// Shared pool construction for the triplet loss and the cosine baseline.
std::vector<std::pair<int, PointPools>> sample_point_pools(
    const Tensor& penultimate, const std::vector<LabelGrid>& labels,
    const std::vector<int>& classes, int tau, int ignore_value, std::uint64_t seed) {
  if (static_cast<int>(labels.size()) != penultimate.n)
    throw domain_error("batch size mismatch between features and labels");
  const int h = penultimate.h, w = penultimate.w;
  for (const auto& lab : labels)
    if (lab.h != h || lab.w != w)
      throw domain_error("labels must be downsampled to the feature resolution");

  // Gather flat indices per label value once.
  std::vector<int> flat_labels;
  flat_labels.reserve(static_cast<std::size_t>(penultimate.n) * h * w);
  for (const auto& lab : labels)
    for (auto v : lab.data) flat_labels.push_back(v);

  std::vector<int> sorted_classes = classes;
  std::sort(sorted_classes.begin(), sorted_classes.end());

  Rng rng(Rng::mix(seed, 0x545249ULL));  // triplet sampling stream
  std::vector<std::pair<int, PointPools>> out;
  for (int c : sorted_classes) {
    std::vector<int> same, other;
    for (int i = 0; i < static_cast<int>(flat_labels.size()); ++i) {
      int v = flat_labels[static_cast<std::size_t>(i)];
      if (v == ignore_value) continue;
      (v == c ? same : other).push_back(i);
    }
    if (same.size() < 2 || other.empty()) continue;

    rng.shuffle(same);
    rng.shuffle(other);
    int pairs = std::min(static_cast<int>(same.size()) / 2, tau);
    int negs = std::min(static_cast<int>(other.size()), tau);
    PointPools pools;
    pools.anchors.assign(same.begin(), same.begin() + pairs);
    pools.positives.assign(same.begin() + pairs, same.begin() + 2 * pairs);
    pools.negatives.assign(other.begin(), other.begin() + negs);
    out.emplace_back(c, std::move(pools));
  }
  return out;
}

std::vector<double> feature_at(const Tensor& penultimate, int flat) {
  const int hw = penultimate.h * penultimate.w;
  const int b = flat / hw, rem = flat % hw;
  const int y = rem / penultimate.w, x = rem % penultimate.w;
  std::vector<double> v(static_cast<std::size_t>(penultimate.c));
  for (int c = 0; c < penultimate.c; ++c) v[static_cast<std::size_t>(c)] = penultimate.at(b, c, y, x);
  return v;
}

void add_feature_grad(Tensor& grad, int flat, const std::vector<double>& g, double scale) {
  const int hw = grad.h * grad.w;
  const int b = flat / hw, rem = flat % hw;
  const int y = rem / grad.w, x = rem % grad.w;
  for (int c = 0; c < grad.c; ++c) grad.at(b, c, y, x) += scale * g[static_cast<std::size_t>(c)];
}

}  // namespace

TripletSet build_triplet_set(const Tensor& penultimate, const std::vector<LabelGrid>& labels,
                             const std::vector<int>& classes, int tau, int ignore_value,
                             std::uint64_t seed) {
  TripletSet set;
  for (auto& [c, pools] : sample_point_pools(penultimate, labels, classes, tau, ignore_value,
                                             seed)) {
    std::size_t count = std::min(pools.anchors.size(), pools.negatives.size());
    if (count == 0) continue;
    ClassTriples ct;
    ct.class_index = c;
    for (std::size_t i = 0; i < count; ++i)
      ct.triples.push_back({pools.anchors[i], pools.positives[i], pools.negatives[i]});
    set.per_class.push_back(std::move(ct));
  }
  return set;
}

double triplet_set_loss(const Tensor& penultimate, const TripletSet& set, double mu,
                        Tensor* grad) {
  if (grad) *grad = Tensor(penultimate.n, penultimate.c, penultimate.h, penultimate.w);
  std::size_t total = set.total();
  if (total == 0) return 0.0;

  double sum = 0;
  const double inv = 1.0 / static_cast<double>(total);
  for (const auto& ct : set.per_class) {
    for (const auto& t : ct.triples) {
      auto a = feature_at(penultimate, t.anchor);
      auto p = feature_at(penultimate, t.positive);
      auto n = feature_at(penultimate, t.negative);
      double dap = triplet_distance(a, p);
      double dan = triplet_distance(a, n);
      double margin = dap - dan + mu;
      if (margin <= 0) continue;  // hinge inactive; subgradient 0 at the kink
      sum += margin;
      if (!grad) continue;
      std::vector<double> dir_ap(a.size()), dir_an(a.size());
      if (dap > 0)
        for (std::size_t i = 0; i < a.size(); ++i) dir_ap[i] = (a[i] - p[i]) / dap;
      if (dan > 0)
        for (std::size_t i = 0; i < a.size(); ++i) dir_an[i] = (a[i] - n[i]) / dan;
      std::vector<double> da(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) da[i] = dir_ap[i] - dir_an[i];
      add_feature_grad(*grad, t.anchor, da, inv);
      add_feature_grad(*grad, t.positive, dir_ap, -inv);
      add_feature_grad(*grad, t.negative, dir_an, inv);
    }
  }
  return sum * inv;
}

namespace {

double cosine(const std::vector<double>& u, const std::vector<double>& v, double& nu,
              double& nv) {
  double dot = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  nu = std::sqrt(uu);
  nv = std::sqrt(vv);
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (nu * nv);
}

}  // namespace

double cosine_contrastive_loss(const Tensor& penultimate, const std::vector<LabelGrid>& labels,
                               const std::vector<int>& classes, int tau, int ignore_value,
                               std::uint64_t seed, Tensor* grad) {
  if (grad) *grad = Tensor(penultimate.n, penultimate.c, penultimate.h, penultimate.w);
  auto pooled = sample_point_pools(penultimate, labels, classes, tau, ignore_value, seed);

  struct Pair {
    int a, b;
  };
  std::vector<Pair> same, cross;
  for (auto& [c, pools] : pooled) {
    for (std::size_t i = 0; i < pools.anchors.size() && i < pools.positives.size(); ++i)
      same.push_back({pools.anchors[i], pools.positives[i]});
    for (std::size_t i = 0; i < pools.anchors.size() && i < pools.negatives.size(); ++i)
      cross.push_back({pools.anchors[i], pools.negatives[i]});
  }

  double loss = 0;
  if (!same.empty()) {
    double inv = 1.0 / static_cast<double>(same.size());
    for (const auto& pr : same) {
      auto u = feature_at(penultimate, pr.a);
      auto v = feature_at(penultimate, pr.b);
      double nu, nv;
      double cs = cosine(u, v, nu, nv);
      loss += (1.0 - cs) * inv;
      if (!grad || nu == 0.0 || nv == 0.0) continue;
      // d(1-cos)/du = -(v/(|u||v|) - cos*u/|u|^2)
      std::vector<double> du(u.size()), dv(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) {
        du[i] = -(v[i] / (nu * nv) - cs * u[i] / (nu * nu));
        dv[i] = -(u[i] / (nu * nv) - cs * v[i] / (nv * nv));
      }
      add_feature_grad(*grad, pr.a, du, inv);
      add_feature_grad(*grad, pr.b, dv, inv);
    }
  }
  if (!cross.empty()) {
    double inv = 1.0 / static_cast<double>(cross.size());
    for (const auto& pr : cross) {
      auto u = feature_at(penultimate, pr.a);
      auto v = feature_at(penultimate, pr.b);
      double nu, nv;
      double cs = cosine(u, v, nu, nv);
      if (cs <= 0) continue;  // hinge inactive
      loss += cs * inv;
      if (!grad || nu == 0.0 || nv == 0.0) continue;
      std::vector<double> du(u.size()), dv(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) {
        du[i] = v[i] / (nu * nv) - cs * u[i] / (nu * nu);
        dv[i] = u[i] / (nu * nv) - cs * v[i] / (nv * nv);
      }
      add_feature_grad(*grad, pr.a, du, inv);
      add_feature_grad(*grad, pr.b, dv, inv);
    }
  }
  return loss;
}

}  // namespace gfsseg
