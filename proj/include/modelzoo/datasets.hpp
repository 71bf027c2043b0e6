#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// Procedural toy datasets. Point sets keep their stated geometry; images live
// in [-1, 1].

enum class TextureKind { kStripes, kChecker, kBlobs };
TextureKind parse_texture_kind(const std::string& name);
const char* texture_kind_name(TextureKind k);

struct DatasetSpec {
  std::string name;
  std::size_t n = 1000;
  std::size_t k = 8;            // mixture modes / blob classes
  double radius = 2.0;
  double sd = 0.1;              // per-mode standard deviation, or point noise
  std::size_t p = 20;
  std::size_t d = 3;
  double sigma2 = 0.1;
  std::size_t sparsity = 3;
  std::size_t rank = 2;
  double mask_rate = 0.3;       // fraction of entries hidden
  std::size_t size = 16;        // image side
  TextureKind texture = TextureKind::kStripes;
};

struct Dataset {
  std::string name;
  std::vector<Tensor> examples;
  std::vector<std::size_t> labels;           // empty when unlabeled
  std::vector<Tensor> masks;                 // masked-ratings: 1 where observed
  std::map<std::string, Tensor> truth;       // ground-truth parameters
};

const std::vector<std::string>& dataset_names();
// Dispatches on spec.name; unknown names raise ConfigError listing the valid ones.
Dataset make_dataset(const DatasetSpec& spec, Rng& rng);

// k centres evenly spaced on a circle, the first on the positive x axis.
std::vector<Tensor> ring_centers(std::size_t k, double radius);

Dataset gaussian_mixture_2d(std::size_t n, std::size_t k, double radius, double sd, Rng& rng);
Dataset two_moons(std::size_t n, double noise, Rng& rng);
Dataset two_spirals(std::size_t n, double noise, Rng& rng);
// x = W h + sigma eps, W with N(0, 1) entries.
Dataset fa_synthetic(std::size_t n, std::size_t p, std::size_t d, double sigma2, Rng& rng);
// Unit-norm dictionary columns; codes with `sparsity` nonzero N(0, 1) entries;
// additive noise sd.
Dataset sparse_synthetic(std::size_t n, std::size_t p, std::size_t d, std::size_t sparsity, double sd, Rng& rng);
// Exact draws from a random binary RBM by enumerating the visible states.
Dataset rbm_synthetic(std::size_t n, std::size_t p, std::size_t d, Rng& rng);
// Rows of a rank-r matrix U V^T with entries hidden at mask_rate.
Dataset masked_ratings(std::size_t n, std::size_t p, std::size_t rank, double mask_rate, Rng& rng);
// [size, size, 1] images. Stripes have period 4 along the columns.
Dataset procedural_textures(std::size_t n, std::size_t size, TextureKind kind, Rng& rng);
Dataset labeled_blobs(std::size_t n, std::size_t k, double sd, Rng& rng);

}  // namespace modelzoo
