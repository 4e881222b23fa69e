#pragma once

#include <optional>
#include <vector>

#include "gfsseg/tensor.hpp"

namespace gfsseg {

struct LossWeights {
  double lambda_aux = 0.4;
  double lambda_triplet_base = 0.5;
  double lambda_triplet_ft = 1.0;
  double mu = 1.0;  // triplet margin
  int tau = 50;     // per-class triplet cap
};

enum class Stage { base, ft };

// Mean negative log softmax probability of the true class over non-ignore
// pixels of the whole batch. Ignore pixels contribute nothing to the value or
// the gradient; an all-ignore batch scores 0 with zero gradient. When grad is
// given it receives d(loss)/d(logits), same shape as logits.
double masked_cross_entropy(const Tensor& logits, const std::vector<LabelGrid>& labels,
                            int ignore_value, Tensor* grad = nullptr);

// Stage compositions over already-reduced scalar terms.
double stage1_loss(double main, double aux, const LossWeights& weights);
double stage2_loss(double main);
double stage_loss_with_triplet(double main, std::optional<double> aux, double triplet,
                               const LossWeights& weights, Stage stage);

double triplet_distance(const std::vector<double>& x, const std::vector<double>& y);
double triplet_loss(const std::vector<double>& a, const std::vector<double>& p,
                    const std::vector<double>& n, double mu);

// One (anchor, positive, negative) sample; values are flat spatial indices
// b*(h*w) + y*w + x into the batch feature maps.
struct Triple {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

struct ClassTriples {
  int class_index = 0;
  std::vector<Triple> triples;
};

struct TripletSet {
  std::vector<ClassTriples> per_class;
  std::size_t total() const;
};

// Nearest-pixel label downsampling to the feature resolution (half-pixel
// centers, ties round up), used before any feature-space sampling.
LabelGrid downsample_labels_nearest(const LabelGrid& labels, int out_h, int out_w);

// Samples up to tau triples per class from the batch. For each class in
// `classes` with at least two same-class points and one other-class point:
// the class's points are shuffled and split into disjoint anchor/positive
// halves (each capped at tau), negatives are drawn from the non-class points
// (capped at tau), and the pools are zipped. Classes failing the requirement
// are skipped. labels must already be at feature resolution. ignore pixels
// never enter any pool. Deterministic per seed.
TripletSet build_triplet_set(const Tensor& penultimate, const std::vector<LabelGrid>& labels,
                             const std::vector<int>& classes, int tau, int ignore_value,
                             std::uint64_t seed);

// Mean hinge over every triple in the set; 0 for an empty set. grad (optional)
// receives d(loss)/d(penultimate).
double triplet_set_loss(const Tensor& penultimate, const TripletSet& set, double mu,
                        Tensor* grad = nullptr);

// Contrastive baseline on the same sampled pools: mean(1 - cos(anchor,
// positive)) + mean(max(0, cos(anchor, negative))). Zero-norm vectors are
// treated as orthogonal to everything.
double cosine_contrastive_loss(const Tensor& penultimate, const std::vector<LabelGrid>& labels,
                               const std::vector<int>& classes, int tau, int ignore_value,
                               std::uint64_t seed, Tensor* grad = nullptr);

}  // namespace gfsseg
