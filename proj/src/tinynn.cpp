#include "planepose/tinynn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace planepose::nn {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr uint32_t kFormatVersion = 1;

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw NonFiniteInput(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

int64_t Tensor::element_count() const {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

Tensor to_tensor(const Matrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<size_t>(m.size()));
  // row-major on disk
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>>(t.data.data(), m.rows(),
                                             m.cols()) = m;
  return t;
}

Tensor to_tensor(const Vector& v) {
  Tensor t;
  t.shape = {v.size()};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

Matrix matrix_from(const Tensor& t) {
  if (t.shape.size() != 2) throw ShapeMismatch("tensor is not rank-2");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(
      t.data.data(), t.shape[0], t.shape[1]);
}

Vector vector_from(const Tensor& t) {
  if (t.shape.size() != 1) throw ShapeMismatch("tensor is not rank-1");
  return Eigen::Map<const Vector>(t.data.data(), t.shape[0]);
}

void MlpSpec::validate() const {
  if (layers.empty()) throw ShapeMismatch("mlp spec has no layers");
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].in <= 0 || layers[i].out <= 0) {
      throw ShapeMismatch("mlp spec has non-positive extents");
    }
    if (i > 0 && layers[i].in != layers[i - 1].out) {
      throw ShapeMismatch("mlp spec chain is inconsistent at layer " +
                          std::to_string(i));
    }
  }
}

std::string MlpSpec::signature() const {
  std::string s = std::to_string(layers.front().in);
  for (const auto& l : layers) {
    s += '-';
    s += std::to_string(l.out);
    s += l.act == Activation::kRelu ? 'r' : 'n';
  }
  return s;
}

MlpSpec Mlp::spec() const {
  MlpSpec s;
  for (const auto& l : layers) {
    s.layers.push_back({static_cast<int>(l.weight.cols()),
                        static_cast<int>(l.weight.rows()), l.act});
  }
  return s;
}

Mlp make_mlp(const MlpSpec& spec, Rng rng) {
  spec.validate();
  Mlp mlp;
  for (const auto& l : spec.layers) {
    LinearLayer layer;
    double bound = std::sqrt(1.0 / l.in);
    layer.weight.resize(l.out, l.in);
    // fill row-major so the draw order matches the serialized layout
    for (int r = 0; r < l.out; ++r) {
      for (int c = 0; c < l.in; ++c) {
        layer.weight(r, c) = rng.uniform(-bound, bound);
      }
    }
    layer.bias.resize(l.out);
    for (int r = 0; r < l.out; ++r) layer.bias(r) = rng.uniform(-bound, bound);
    layer.act = l.act;
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Matrix mlp_forward(const Mlp& mlp, const Matrix& x, MlpCache* cache) {
  if (x.rows() != mlp.in_dim()) {
    throw ShapeMismatch("mlp input has " + std::to_string(x.rows()) +
                        " rows, expected " + std::to_string(mlp.in_dim()));
  }
  require_finite(x, "mlp input");
  if (cache) {
    cache->inputs.clear();
    cache->preacts.clear();
  }
  Matrix cur = x;
  for (const auto& l : mlp.layers) {
    if (cache) cache->inputs.push_back(cur);
    Matrix z = (l.weight * cur).colwise() + l.bias;
    if (cache) cache->preacts.push_back(z);
    cur = l.act == Activation::kRelu ? z.cwiseMax(0.0) : std::move(z);
  }
  return cur;
}

MlpGrads MlpGrads::zeros_like(const Mlp& mlp) {
  MlpGrads g;
  for (const auto& l : mlp.layers) {
    g.dweight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    g.dbias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

void MlpGrads::set_zero() {
  for (auto& m : dweight) m.setZero();
  for (auto& v : dbias) v.setZero();
}

Matrix mlp_backward(const Mlp& mlp, const MlpCache& cache,
                    const Matrix& grad_out, MlpGrads* grads) {
  if (cache.inputs.size() != mlp.layers.size()) {
    throw ShapeMismatch("mlp cache does not match network depth");
  }
  Matrix g = grad_out;
  for (int i = static_cast<int>(mlp.layers.size()) - 1; i >= 0; --i) {
    const auto& l = mlp.layers[i];
    Matrix dz = std::move(g);
    if (l.act == Activation::kRelu) {
      dz = (cache.preacts[i].array() > 0.0)
               .select(dz, Matrix::Zero(dz.rows(), dz.cols()));
    }
    if (grads) {
      grads->dweight[i].noalias() += dz * cache.inputs[i].transpose();
      grads->dbias[i] += dz.rowwise().sum();
    }
    g = l.weight.transpose() * dz;
  }
  return g;
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) throw EmptyInput("softmax of empty vector");
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Vector softmax_backward(const Vector& soft, const Vector& grad_out) {
  double dot = soft.dot(grad_out);
  return soft.cwiseProduct((grad_out.array() - dot).matrix());
}

LossValueGrad mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeMismatch("loss operands differ in shape");
  }
  LossValueGrad out;
  Matrix e = pred - target;
  out.value = e.squaredNorm();
  out.grad = 2.0 * e;
  return out;
}

LossValueGrad l1_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeMismatch("loss operands differ in shape");
  }
  LossValueGrad out;
  Matrix e = pred - target;
  out.value = e.array().abs().sum();
  out.grad = e.array().sign().matrix();
  return out;
}

LossValueGrad huber_loss(const Matrix& pred, const Matrix& target,
                         double delta) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeMismatch("loss operands differ in shape");
  }
  LossValueGrad out;
  Matrix e = pred - target;
  out.grad = e;
  out.value = 0;
  for (Eigen::Index c = 0; c < e.cols(); ++c) {
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
      double v = e(r, c);
      if (std::abs(v) <= delta) {
        out.value += 0.5 * v * v;
      } else {
        out.value += delta * (std::abs(v) - 0.5 * delta);
        out.grad(r, c) = delta * (v > 0 ? 1.0 : -1.0);
      }
    }
  }
  return out;
}

std::vector<ParamView> param_views(Mlp& mlp, const MlpGrads& grads) {
  std::vector<ParamView> views;
  for (size_t i = 0; i < mlp.layers.size(); ++i) {
    views.push_back({mlp.layers[i].weight.data(), grads.dweight[i].data(),
                     mlp.layers[i].weight.size()});
    views.push_back({mlp.layers[i].bias.data(), grads.dbias[i].data(),
                     mlp.layers[i].bias.size()});
  }
  return views;
}

void AdamWState::init(const std::vector<ParamView>& views) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& w : views) {
    m.push_back(Vector::Zero(w.size));
    v.push_back(Vector::Zero(w.size));
  }
}

void adamw_step(AdamWState& state, const AdamWConfig& cfg,
                const std::vector<ParamView>& views) {
  if (state.m.size() != views.size()) {
    throw ShapeMismatch("optimizer state does not match parameter list");
  }
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < views.size(); ++i) {
    auto p = Eigen::Map<Vector>(views[i].param, views[i].size);
    auto g = Eigen::Map<const Vector>(views[i].grad, views[i].size);
    if (state.m[i].size() != views[i].size) {
      throw ShapeMismatch("optimizer moment size mismatch");
    }
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    // decoupled weight decay
    p.array() -= cfg.lr *
                 ((state.m[i].array() / bc1) /
                      ((state.v[i].array() / bc2).sqrt() + cfg.eps) +
                  cfg.weight_decay * p.array());
  }
}

void Checkpoint::put(const std::string& name, Tensor t) {
  entries.emplace_back(name, std::move(t));
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw CheckpointError("checkpoint entry missing: " + name);
  return *t;
}

double Checkpoint::scalar(const std::string& name) const {
  const Tensor& t = at(name);
  if (t.data.size() != 1) {
    throw CheckpointError("checkpoint entry is not scalar: " + name);
  }
  return t.data[0];
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kFormatVersion);
  write_pod(os, ck.spec_hash);
  write_pod(os, static_cast<uint64_t>(ck.entries.size()));
  for (const auto& [name, t] : ck.entries) {
    write_pod(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t e : t.shape) write_pod(os, e);
    if (static_cast<int64_t>(t.data.size()) != t.element_count()) {
      throw ShapeMismatch("tensor payload does not match its shape: " + name);
    }
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("bad checkpoint magic");
  }
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " +
                          std::to_string(version));
  }
  Checkpoint ck;
  ck.spec_hash = read_pod<uint64_t>(is);
  uint64_t count = read_pod<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is);
    if (name_len > 4096) throw CheckpointError("entry name too long");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = read_pod<uint32_t>(is);
    if (rank > 8) throw CheckpointError("tensor rank too large");
    Tensor t;
    for (uint32_t d = 0; d < rank; ++d) {
      int64_t e = read_pod<int64_t>(is);
      if (e < 0) throw CheckpointError("negative tensor extent");
      t.shape.push_back(e);
    }
    int64_t n = t.element_count();
    if (n < 0 || n > (1LL << 32)) throw CheckpointError("tensor too large");
    t.data.resize(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint truncated");
    ck.entries.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

void append_mlp(Checkpoint& ck, const std::string& prefix, const Mlp& mlp) {
  for (size_t i = 0; i < mlp.layers.size(); ++i) {
    ck.put(prefix + ".layer" + std::to_string(i) + ".weight",
           to_tensor(mlp.layers[i].weight));
    ck.put(prefix + ".layer" + std::to_string(i) + ".bias",
           to_tensor(mlp.layers[i].bias));
  }
}

Mlp read_mlp(const Checkpoint& ck, const std::string& prefix,
             const MlpSpec& expect) {
  expect.validate();
  Mlp mlp;
  for (size_t i = 0; i < expect.layers.size(); ++i) {
    const auto& spec = expect.layers[i];
    LinearLayer l;
    l.weight = matrix_from(
        ck.at(prefix + ".layer" + std::to_string(i) + ".weight"));
    l.bias =
        vector_from(ck.at(prefix + ".layer" + std::to_string(i) + ".bias"));
    if (l.weight.rows() != spec.out || l.weight.cols() != spec.in ||
        l.bias.size() != spec.out) {
      throw CheckpointError("checkpoint shape mismatch at " + prefix +
                            ".layer" + std::to_string(i));
    }
    l.act = spec.act;
    mlp.layers.push_back(std::move(l));
  }
  return mlp;
}

void append_adamw(Checkpoint& ck, const std::string& prefix,
                  const AdamWState& st) {
  Tensor step;
  step.shape = {1};
  step.data = {static_cast<double>(st.step)};
  ck.put(prefix + ".step", std::move(step));
  for (size_t i = 0; i < st.m.size(); ++i) {
    ck.put(prefix + ".m" + std::to_string(i), to_tensor(st.m[i]));
    ck.put(prefix + ".v" + std::to_string(i), to_tensor(st.v[i]));
  }
}

AdamWState read_adamw(const Checkpoint& ck, const std::string& prefix,
                      const std::vector<ParamView>& views) {
  AdamWState st;
  st.step = static_cast<int64_t>(ck.scalar(prefix + ".step"));
  for (size_t i = 0; i < views.size(); ++i) {
    st.m.push_back(vector_from(ck.at(prefix + ".m" + std::to_string(i))));
    st.v.push_back(vector_from(ck.at(prefix + ".v" + std::to_string(i))));
    if (st.m.back().size() != views[i].size ||
        st.v.back().size() != views[i].size) {
      throw CheckpointError("optimizer state shape mismatch on resume");
    }
  }
  return st;
}

}  // namespace planepose::nn
