#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "planepose/errors.hpp"
#include "planepose/rng.hpp"

// Minimal dense-MLP toolkit: exactly the layer types the pose networks
// need, with hand-written backward passes. Batches live in matrix columns.
namespace planepose::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Flat row-major buffer with a shape, used at serialization boundaries.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  int64_t element_count() const;
};

Tensor to_tensor(const Matrix& m);
Tensor to_tensor(const Vector& v);
Matrix matrix_from(const Tensor& t);
Vector vector_from(const Tensor& t);

enum class Activation { kNone, kRelu };

struct LinearLayer {
  Matrix weight;  // out x in
  Vector bias;
  Activation act = Activation::kNone;
};

struct MlpSpec {
  struct Layer {
    int in = 0;
    int out = 0;
    Activation act = Activation::kNone;
  };
  std::vector<Layer> layers;

  void validate() const;  // throws ShapeMismatch on a broken chain
  int in_dim() const { return layers.front().in; }
  int out_dim() const { return layers.back().out; }
  std::string signature() const;  // e.g. "8-1024r-1024n"
};

struct Mlp {
  std::vector<LinearLayer> layers;

  MlpSpec spec() const;
  int in_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().weight.rows()); }
};

// Weights and biases drawn from U(-sqrt(1/in), sqrt(1/in)).
Mlp make_mlp(const MlpSpec& spec, Rng rng);

struct MlpCache {
  std::vector<Matrix> inputs;    // per layer
  std::vector<Matrix> preacts;
};

Matrix mlp_forward(const Mlp& mlp, const Matrix& x, MlpCache* cache = nullptr);

struct MlpGrads {
  std::vector<Matrix> dweight;
  std::vector<Vector> dbias;

  static MlpGrads zeros_like(const Mlp& mlp);
  void set_zero();
};

// Accumulates parameter gradients (+=) and returns the input gradient.
Matrix mlp_backward(const Mlp& mlp, const MlpCache& cache,
                    const Matrix& grad_out, MlpGrads* grads);

// Max-subtracted softmax and its vector-Jacobian product.
Vector softmax(const Vector& logits);
Vector softmax_backward(const Vector& soft, const Vector& grad_out);

// Sum-reduced losses with gradients w.r.t. pred.
struct LossValueGrad {
  double value = 0;
  Matrix grad;
};
LossValueGrad mse_loss(const Matrix& pred, const Matrix& target);
LossValueGrad l1_loss(const Matrix& pred, const Matrix& target);
LossValueGrad huber_loss(const Matrix& pred, const Matrix& target,
                         double delta = 1.0);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// One contiguous parameter block and its gradient.
struct ParamView {
  double* param = nullptr;
  const double* grad = nullptr;
  int64_t size = 0;
};

std::vector<ParamView> param_views(Mlp& mlp, const MlpGrads& grads);

struct AdamWState {
  int64_t step = 0;
  std::vector<Vector> m;
  std::vector<Vector> v;

  void init(const std::vector<ParamView>& views);
  bool initialized() const { return !m.empty(); }
};

void adamw_step(AdamWState& state, const AdamWConfig& cfg,
                const std::vector<ParamView>& views);

// ---- checkpoint container ----
// Binary layout: magic "PPCKPT\0\0", u32 format version, u64 spec hash,
// u64 entry count, then per entry: u32 name length, name bytes, u32 rank,
// i64 extents, and the payload as little-endian 8-byte doubles.

struct Checkpoint {
  uint64_t spec_hash = 0;
  std::vector<std::pair<std::string, Tensor>> entries;

  void put(const std::string& name, Tensor t);
  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;  // CheckpointError if absent
  double scalar(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

uint64_t fnv1a(const std::string& s);

void append_mlp(Checkpoint& ck, const std::string& prefix, const Mlp& mlp);
Mlp read_mlp(const Checkpoint& ck, const std::string& prefix,
             const MlpSpec& expect);
void append_adamw(Checkpoint& ck, const std::string& prefix,
                  const AdamWState& st);
AdamWState read_adamw(const Checkpoint& ck, const std::string& prefix,
                      const std::vector<ParamView>& views);

}  // namespace planepose::nn
