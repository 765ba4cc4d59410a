#include "fshpo/tinynet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <Eigen/Core>

#include "fshpo/checksum.hpp"
#include "fshpo/random.hpp"

namespace fshpo {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Evaluated into aligned storage first: a packet-wise column reduction
/// straight into an unaligned destination sums peeled and vectorized columns
/// in different orders, so the result would depend on the buffer address.
RowVec column_sums(const Mat& m) {
  RowVec out = m.colwise().sum();
  return out;
}

CMapMat view(const std::vector<double>& v, const TensorSlot& s) {
  return CMapMat(v.data() + s.offset, s.rows, s.cols);
}
MapMat view(std::vector<double>& v, const TensorSlot& s) {
  return MapMat(v.data() + s.offset, s.rows, s.cols);
}

// 3x3, stride 1, zero padding 1. Column layout is (ky, kx, c).
void im2col(const double* in, int batch, int h, int w, int c, Buffer& col) {
  const std::size_t k = 9 * static_cast<std::size_t>(c);
  col.assign(static_cast<std::size_t>(batch) * h * w * k, 0.0);
  for (int b = 0; b < batch; ++b) {
    const double* img = in + static_cast<std::size_t>(b) * h * w * c;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double* row = col.data() + ((static_cast<std::size_t>(b) * h + y) * w + x) * k;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = y + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = x + kx - 1;
            if (ix < 0 || ix >= w) continue;
            std::memcpy(row + (ky * 3 + kx) * c, img + (static_cast<std::size_t>(iy) * w + ix) * c,
                        sizeof(double) * static_cast<std::size_t>(c));
          }
        }
      }
    }
  }
}

void col2im(const Buffer& col, int batch, int h, int w, int c, Buffer& out) {
  const std::size_t k = 9 * static_cast<std::size_t>(c);
  out.assign(static_cast<std::size_t>(batch) * h * w * c, 0.0);
  for (int b = 0; b < batch; ++b) {
    double* img = out.data() + static_cast<std::size_t>(b) * h * w * c;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double* row = col.data() + ((static_cast<std::size_t>(b) * h + y) * w + x) * k;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = y + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = x + kx - 1;
            if (ix < 0 || ix >= w) continue;
            double* dst = img + (static_cast<std::size_t>(iy) * w + ix) * c;
            const double* src = row + (ky * 3 + kx) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

// 2x2 max pool, stride 2; argmax holds flat input indices (first max wins).
void maxpool(const Buffer& in, int batch, int h, int w, int c,
             Buffer& out, std::vector<std::uint32_t>& argmax) {
  const int oh = h / 2, ow = w / 2;
  out.resize(static_cast<std::size_t>(batch) * oh * ow * c);
  argmax.resize(out.size());
  std::size_t o = 0;
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        for (int ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((static_cast<std::size_t>(b) * h + 2 * y) * w + 2 * x) * c + ch;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
              if (in[idx] > in[best]) best = idx;
            }
          }
          out[o] = in[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
}

void relu_inplace(Mat& m) { m = m.cwiseMax(0.0); }

}  // namespace

struct NetWorkspace {
  int batch = 0;
  Buffer col1, a1, p1, col2, a2, p2;
  std::vector<std::uint32_t> arg1, arg2;
  Mat z1, z2, emb, logits;
  // backward
  Mat dlogits, demb, dp2, da2, da1;
  Buffer dcol2_buf, dp1;
};

void NetSpec::validate() const {
  if (input.height <= 0 || input.width <= 0 || input.channels <= 0)
    throw std::invalid_argument("input shape must be positive");
  if (input.height % 4 != 0 || input.width % 4 != 0)
    throw std::invalid_argument("input height and width must be multiples of 4");
  if (conv1_channels <= 0 || conv2_channels <= 0 || embedding_dim <= 0 || n_classes <= 0)
    throw std::invalid_argument("layer widths must be positive");
}

std::uint64_t NetSpec::hash() const {
  std::uint64_t h = tag_hash("tinynet-v1");
  for (int v : {input.height, input.width, input.channels, conv1_channels, conv2_channels,
                embedding_dim, n_classes})
    h = derive_seed(h, static_cast<std::uint64_t>(v));
  return h;
}

NetLayout NetLayout::of(const NetSpec& spec) {
  spec.validate();
  NetLayout l;
  std::size_t off = 0;
  auto place = [&](int rows, int cols, bool weight) {
    TensorSlot s{off, rows, cols, weight};
    off += s.size();
    return s;
  };
  const int c = spec.input.channels;
  l.conv1_w = place(9 * c, spec.conv1_channels, true);
  l.conv1_b = place(1, spec.conv1_channels, false);
  l.conv2_w = place(9 * spec.conv1_channels, spec.conv2_channels, true);
  l.conv2_b = place(1, spec.conv2_channels, false);
  l.fc_w = place(spec.flat_features(), spec.embedding_dim, true);
  l.fc_b = place(1, spec.embedding_dim, false);
  l.head_w = place(spec.embedding_dim, spec.n_classes, true);
  l.head_b = place(1, spec.n_classes, false);
  l.total = off;
  return l;
}

bool NetParams::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

NetParams init_params(const NetSpec& spec, std::uint64_t seed) {
  const auto layout = NetLayout::of(spec);
  NetParams p{spec, std::vector<double>(layout.total, 0.0)};
  Rng rng = make_rng(derive_seed(seed, tag_hash("init")));
  for (const auto& slot : layout.slots()) {
    if (!slot.is_weight) continue;
    const double sd = std::sqrt(2.0 / slot.rows);
    for (std::size_t i = 0; i < slot.size(); ++i) p.values[slot.offset + i] = normal(rng, 0.0, sd);
  }
  return p;
}

namespace {

void check_input(const NetSpec& spec, const ImageBatch& images) {
  if (!(images.shape() == spec.input))
    throw std::invalid_argument("image shape " + std::to_string(images.shape().height) + "x" +
                                std::to_string(images.shape().width) + "x" +
                                std::to_string(images.shape().channels) +
                                " does not match the network input");
}

void run_forward(const NetParams& params, const NetLayout& L, std::span<const double> pixels,
                 int batch, NetWorkspace& ws) {
  const auto& s = params.spec;
  const int h = s.input.height, w = s.input.width, c = s.input.channels;
  const int c1 = s.conv1_channels, c2 = s.conv2_channels;
  ws.batch = batch;

  im2col(pixels.data(), batch, h, w, c, ws.col1);
  CMapMat col1(ws.col1.data(), static_cast<Eigen::Index>(batch) * h * w, 9 * c);
  ws.z1.noalias() = col1 * view(params.values, L.conv1_w);
  ws.z1.rowwise() += view(params.values, L.conv1_b).row(0);
  relu_inplace(ws.z1);
  ws.a1.assign(ws.z1.data(), ws.z1.data() + ws.z1.size());
  maxpool(ws.a1, batch, h, w, c1, ws.p1, ws.arg1);

  const int h2 = h / 2, w2 = w / 2;
  im2col(ws.p1.data(), batch, h2, w2, c1, ws.col2);
  CMapMat col2(ws.col2.data(), static_cast<Eigen::Index>(batch) * h2 * w2, 9 * c1);
  ws.z2.noalias() = col2 * view(params.values, L.conv2_w);
  ws.z2.rowwise() += view(params.values, L.conv2_b).row(0);
  relu_inplace(ws.z2);
  ws.a2.assign(ws.z2.data(), ws.z2.data() + ws.z2.size());
  maxpool(ws.a2, batch, h2, w2, c2, ws.p2, ws.arg2);

  CMapMat flat(ws.p2.data(), batch, s.flat_features());
  ws.emb.noalias() = flat * view(params.values, L.fc_w);
  ws.emb.rowwise() += view(params.values, L.fc_b).row(0);
  relu_inplace(ws.emb);

  ws.logits.noalias() = ws.emb * view(params.values, L.head_w);
  ws.logits.rowwise() += view(params.values, L.head_b).row(0);
}

}  // namespace

// Inference runs one image at a time: batched GEMM blocking would otherwise
// make a row's rounding depend on the rest of the batch.
ForwardResult forward(const NetParams& params, const ImageBatch& images) {
  check_input(params.spec, images);
  const auto L = NetLayout::of(params.spec);
  NetWorkspace ws;
  ForwardResult r;
  r.batch = static_cast<int>(images.count());
  const auto d = static_cast<std::size_t>(params.spec.embedding_dim);
  const auto k = static_cast<std::size_t>(params.spec.n_classes);
  r.embeddings.resize(images.count() * d);
  r.logits.resize(images.count() * k);
  for (std::size_t i = 0; i < images.count(); ++i) {
    run_forward(params, L, images.image(i), 1, ws);
    std::copy(ws.emb.data(), ws.emb.data() + d, r.embeddings.begin() + static_cast<std::ptrdiff_t>(i * d));
    std::copy(ws.logits.data(), ws.logits.data() + k, r.logits.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return r;
}

std::vector<double> embed(const NetParams& params, const ImageBatch& images) {
  check_input(params.spec, images);
  const auto L = NetLayout::of(params.spec);
  const auto d = static_cast<std::size_t>(params.spec.embedding_dim);
  std::vector<double> out(images.count() * d);
  NetWorkspace ws;
  for (std::size_t i = 0; i < images.count(); ++i) {
    run_forward(params, L, images.image(i), 1, ws);
    std::copy(ws.emb.data(), ws.emb.data() + d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

void loss_and_grad(const NetParams& params, const ImageBatch& images, std::span<const int> labels,
                   double l2, NetWorkspace& ws, LossAndGrad& out) {
  const auto& s = params.spec;
  check_input(s, images);
  const int batch = static_cast<int>(images.count());
  if (batch == 0) throw std::invalid_argument("empty batch");
  if (labels.size() != static_cast<std::size_t>(batch))
    throw std::invalid_argument("label count does not match batch size");
  for (int y : labels)
    if (y < 0 || y >= s.n_classes) throw std::invalid_argument("label out of range");

  const auto L = NetLayout::of(s);
  run_forward(params, L, images.pixels(), batch, ws);

  const int h = s.input.height, w = s.input.width, c = s.input.channels;
  const int c1 = s.conv1_channels, c2 = s.conv2_channels;
  const int h2 = h / 2, w2 = w / 2;
  const int k = s.n_classes;

  // Softmax cross-entropy.
  ws.dlogits.resize(batch, k);
  double ce = 0.0;
  for (int i = 0; i < batch; ++i) {
    const auto row = ws.logits.row(i);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    ce += lse - row(labels[static_cast<std::size_t>(i)]);
    ws.dlogits.row(i) = (row.array() - lse).exp();
    ws.dlogits(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  }
  ce /= batch;
  ws.dlogits /= static_cast<double>(batch);

  double reg = 0.0;
  for (const auto& slot : L.slots())
    if (slot.is_weight)
      for (std::size_t i = slot.offset; i < slot.offset + slot.size(); ++i) reg += params.values[i] * params.values[i];
  out.data_loss = ce;
  out.loss = ce + l2 * reg;

  out.grads.assign(L.total, 0.0);
  auto& g = out.grads;

  // Head.
  view(g, L.head_w).noalias() = ws.emb.transpose() * ws.dlogits;
  view(g, L.head_b) = column_sums(ws.dlogits);
  ws.demb.noalias() = ws.dlogits * view(params.values, L.head_w).transpose();
  ws.demb = (ws.emb.array() > 0.0).select(ws.demb, 0.0);

  // Embedding layer.
  CMapMat flat(ws.p2.data(), batch, s.flat_features());
  view(g, L.fc_w).noalias() = flat.transpose() * ws.demb;
  view(g, L.fc_b) = column_sums(ws.demb);
  ws.dp2.noalias() = ws.demb * view(params.values, L.fc_w).transpose();

  // Pool 2 -> conv 2.
  ws.da2.setZero(static_cast<Eigen::Index>(batch) * h2 * w2, c2);
  {
    double* da2 = ws.da2.data();
    const double* dp2 = ws.dp2.data();
    for (std::size_t i = 0; i < ws.arg2.size(); ++i)
      if (ws.a2[ws.arg2[i]] > 0.0) da2[ws.arg2[i]] += dp2[i];
  }
  CMapMat col2(ws.col2.data(), static_cast<Eigen::Index>(batch) * h2 * w2, 9 * c1);
  view(g, L.conv2_w).noalias() = col2.transpose() * ws.da2;
  view(g, L.conv2_b) = column_sums(ws.da2);
  ws.dcol2_buf.resize(static_cast<std::size_t>(batch) * h2 * w2 * 9 * c1);
  MapMat dcol2(ws.dcol2_buf.data(), static_cast<Eigen::Index>(batch) * h2 * w2, 9 * c1);
  dcol2.noalias() = ws.da2 * view(params.values, L.conv2_w).transpose();
  col2im(ws.dcol2_buf, batch, h2, w2, c1, ws.dp1);

  // Pool 1 -> conv 1.
  ws.da1.setZero(static_cast<Eigen::Index>(batch) * h * w, c1);
  {
    double* da1 = ws.da1.data();
    for (std::size_t i = 0; i < ws.arg1.size(); ++i)
      if (ws.a1[ws.arg1[i]] > 0.0) da1[ws.arg1[i]] += ws.dp1[i];
  }
  CMapMat col1(ws.col1.data(), static_cast<Eigen::Index>(batch) * h * w, 9 * c);
  view(g, L.conv1_w).noalias() = col1.transpose() * ws.da1;
  view(g, L.conv1_b) = column_sums(ws.da1);

  if (l2 != 0.0) {
    for (const auto& slot : L.slots()) {
      if (!slot.is_weight) continue;
      view(g, slot) += (2.0 * l2) * view(params.values, slot);
    }
  }
}

LossAndGrad loss_and_grad(const NetParams& params, const ImageBatch& images,
                          std::span<const int> labels, double l2) {
  NetWorkspace ws;
  LossAndGrad out;
  loss_and_grad(params, images, labels, l2, ws, out);
  return out;
}

double lr_at(std::int64_t t, double lr0, std::int64_t period) {
  if (t < 0) throw std::invalid_argument("update index must be non-negative");
  if (period < 1) throw std::invalid_argument("schedule period must be >= 1");
  const double phase = static_cast<double>(t % period) / static_cast<double>(period);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * phase));
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "SGD") return OptimizerKind::kSgd;
  if (s == "ADAM") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "SGD" : "ADAM"; }

OptimizerState OptimizerState::zeros(OptimizerKind kind, std::size_t n) {
  OptimizerState s;
  s.kind = kind;
  s.m.assign(n, 0.0);
  if (kind == OptimizerKind::kAdam) s.v.assign(n, 0.0);
  return s;
}

bool step(OptimizerState& state, std::span<double> params, std::span<const double> grads,
          double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      (state.kind == OptimizerKind::kAdam && state.v.size() != params.size()))
    throw std::invalid_argument("optimizer state does not match parameter shapes");
  ++state.t;
  bool finite = true;
  if (state.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i] = kSgdMomentum * state.m[i] - lr * grads[i];
      params[i] += state.m[i];
      finite = finite && std::isfinite(params[i]);
    }
  } else {
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(kAdamBeta1, t);
    const double c2 = 1.0 - std::pow(kAdamBeta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * grads[i];
      state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * grads[i] * grads[i];
      const double mhat = state.m[i] / c1;
      const double vhat = state.v[i] / c2;
      params[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEpsilon);
      finite = finite && std::isfinite(params[i]);
    }
  }
  return finite;
}

TrainConfig TrainConfig::from_configuration(const Configuration& config) {
  TrainConfig c;
  c.optimizer = parse_optimizer(config.category(param_names::kOptimizer));
  c.lr0 = config.real(param_names::kLearningRate);
  c.l2 = config.real(param_names::kL2);
  c.batch_size = config.integer(param_names::kBatchSize);
  c.decay_every = config.integer(param_names::kDecayEvery);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(l2 >= 0.0)) throw std::invalid_argument("l2 must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (decay_every < 1) throw std::invalid_argument("decay_every must be >= 1");
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[8] = {'F', 'S', 'H', 'P', 'O', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void doubles(const std::vector<double>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    const auto* p = reinterpret_cast<const std::byte*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size() * sizeof(double));
  }
  void string(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    buf_.insert(buf_.end(), p, p + s.size());
  }
  std::vector<std::byte> take() { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> b) : b_(b) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<double> doubles() {
    const auto n = pod<std::uint64_t>();
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), b_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("checkpoint is truncated");
  }
  std::span<const std::byte> b_;
  std::size_t pos_ = 0;
};

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

}  // namespace

std::vector<std::byte> TrainState::serialize() const {
  Writer w;
  for (char ch : kMagic) w.pod(ch);
  w.pod(kCheckpointVersion);
  const auto& s = extractor.params.spec;
  w.pod(s.hash());
  for (int v : {s.input.height, s.input.width, s.input.channels, s.conv1_channels,
                s.conv2_channels, s.embedding_dim, s.n_classes})
    w.pod(static_cast<std::int32_t>(v));
  w.pod(seed);
  w.pod(extractor.updates_trained);
  w.string(extractor.config_id);
  w.pod(last_loss);
  w.pod(static_cast<std::uint8_t>(diverged));
  w.doubles(extractor.params.values);
  w.pod(static_cast<std::uint8_t>(opt.kind));
  w.pod(opt.t);
  w.doubles(opt.m);
  w.doubles(opt.v);
  auto bytes = w.take();
  const auto crc = crc32(bytes);
  const auto* p = reinterpret_cast<const std::byte*>(&crc);
  bytes.insert(bytes.end(), p, p + sizeof crc);
  return bytes;
}

TrainState TrainState::deserialize(std::span<const std::byte> bytes) {
  if (bytes.size() < sizeof(kMagic) + 4) throw std::runtime_error("checkpoint is truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.first(bytes.size() - 4);
  if (crc32(body) != stored) throw std::runtime_error("checkpoint checksum mismatch");
  Reader r(body);
  for (char ch : kMagic)
    if (r.pod<char>() != ch) throw std::runtime_error("not a checkpoint file");
  if (r.pod<std::uint32_t>() != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version");
  const auto spec_hash = r.pod<std::uint64_t>();
  NetSpec s;
  s.input.height = r.pod<std::int32_t>();
  s.input.width = r.pod<std::int32_t>();
  s.input.channels = r.pod<std::int32_t>();
  s.conv1_channels = r.pod<std::int32_t>();
  s.conv2_channels = r.pod<std::int32_t>();
  s.embedding_dim = r.pod<std::int32_t>();
  s.n_classes = r.pod<std::int32_t>();
  if (s.hash() != spec_hash) throw std::runtime_error("checkpoint spec hash mismatch");
  TrainState st;
  st.seed = r.pod<std::uint64_t>();
  st.extractor.updates_trained = r.pod<std::int64_t>();
  st.extractor.config_id = r.string();
  st.last_loss = r.pod<double>();
  st.diverged = r.pod<std::uint8_t>() != 0;
  st.extractor.params.spec = s;
  st.extractor.params.values = r.doubles();
  if (st.extractor.params.values.size() != NetLayout::of(s).total)
    throw std::runtime_error("checkpoint parameter count does not match its spec");
  st.opt.kind = static_cast<OptimizerKind>(r.pod<std::uint8_t>());
  st.opt.t = r.pod<std::int64_t>();
  st.opt.m = r.doubles();
  st.opt.v = r.doubles();
  return st;
}

void TrainState::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState TrainState::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(std::as_bytes(std::span(raw.data(), raw.size())));
}

// ---- training loop ----

namespace {

/// Index stream over the training examples: concatenated per-epoch
/// permutations, each derived from (seed, epoch).
class ShuffleStream {
 public:
  ShuffleStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::size_t at(std::int64_t pos) {
    const auto epoch = static_cast<std::uint64_t>(pos) / n_;
    if (!loaded_ || epoch != epoch_) {
      perm_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
      Rng rng = make_rng(derive_seed(seed_, tag_hash("shuffle"), epoch));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
      loaded_ = true;
    }
    return perm_[static_cast<std::uint64_t>(pos) % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  bool loaded_ = false;
  std::vector<std::size_t> perm_;
};

}  // namespace

TrainState train(const TrainSplit& split, const NetSpec& spec, const TrainConfig& cfg,
                 std::int64_t n_updates, std::uint64_t seed, const TrainOptions& options,
                 std::optional<TrainState> resume) {
  cfg.validate();
  if (split.images == nullptr || split.indices.empty())
    throw std::invalid_argument("training split is empty");
  if (split.indices.size() != split.labels.size())
    throw std::invalid_argument("training split labels do not match indices");
  if (split.n_classes != spec.n_classes)
    throw std::invalid_argument("training split class count does not match the head width");
  if (!(split.images->shape() == spec.input))
    throw std::invalid_argument("training images do not match the network input shape");
  if (options.policy) options.policy->validate();

  TrainState st;
  if (resume) {
    st = std::move(*resume);
    if (st.seed != seed) throw std::invalid_argument("resume state was trained with another seed");
    if (!(st.extractor.params.spec == spec))
      throw std::invalid_argument("resume state has a different network spec");
    if (st.opt.kind != cfg.optimizer)
      throw std::invalid_argument("resume state uses a different optimizer");
    if (st.extractor.updates_trained > n_updates)
      throw std::invalid_argument("resume state is already past the requested update count");
  } else {
    st.extractor.params = init_params(spec, seed);
    st.opt = OptimizerState::zeros(cfg.optimizer, st.extractor.params.values.size());
    st.seed = seed;
  }
  if (st.diverged) return st;

  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const auto img_size = spec.input.size();
  ShuffleStream stream(split.indices.size(), seed);
  ImageBatch batch(spec.input, b);
  std::vector<int> labels(b);
  NetWorkspace ws;
  LossAndGrad lg;

  for (std::int64_t u = st.extractor.updates_trained; u < n_updates; ++u) {
    for (std::size_t i = 0; i < b; ++i) {
      const auto k = stream.at(u * cfg.batch_size + static_cast<std::int64_t>(i));
      const auto src = split.images->image(split.indices[k]);
      std::copy(src.begin(), src.end(), batch.pixels().begin() + static_cast<std::ptrdiff_t>(i * img_size));
      labels[i] = split.labels[k];
    }
    if (options.baseline_augmentation || options.policy) {
      Rng aug_rng = make_rng(derive_seed(seed, tag_hash("aug"), static_cast<std::uint64_t>(u)));
      if (options.baseline_augmentation) apply_baseline(batch, aug_rng);
      if (options.policy) apply_policy(batch, *options.policy, aug_rng);
    }
    loss_and_grad(st.extractor.params, batch, labels, cfg.l2, ws, lg);
    st.last_loss = lg.loss;
    if (!std::isfinite(lg.loss)) {
      st.diverged = true;
      break;
    }
    const double lr = lr_at(u, cfg.lr0, cfg.decay_every);
    st.extractor.updates_trained = u + 1;
    if (!step(st.opt, st.extractor.params.values, lg.grads, lr)) {
      st.diverged = true;
      break;
    }
  }
  return st;
}

double training_accuracy(const NetParams& params, const TrainSplit& split) {
  if (split.indices.empty()) return 0.0;
  constexpr std::size_t kChunk = 128;
  const auto& shape = params.spec.input;
  const auto k = static_cast<std::size_t>(params.spec.n_classes);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.indices.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, split.indices.size() - start);
    ImageBatch imgs(shape, n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = split.images->image(split.indices[start + i]);
      std::copy(src.begin(), src.end(), imgs.image(i).begin());
    }
    const auto r = forward(params, imgs);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* row = r.logits.data() + i * k;
      const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == split.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.indices.size());
}

}  // namespace fshpo
