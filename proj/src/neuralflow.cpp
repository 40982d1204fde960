#include "deepsnake/neuralflow.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "deepsnake/error.hpp"

namespace deepsnake {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ConstVecMap = Eigen::Map<const ColVec<T>>;
template <class T>
using VecMap = Eigen::Map<ColVec<T>>;

// Rows are (channel, ky, kx); columns are output pixels in raster order.
template <class T>
void im2col(const T* in, int channels, int side, T* cols) {
  const int n = side * side;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * n;
        const int dx = kx - 1;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(side, side - dx);
        for (int y = 0; y < side; ++y) {
          T* out = row + static_cast<std::size_t>(y) * side;
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= side) {
            std::fill(out, out + side, T(0));
            continue;
          }
          const T* src = in + static_cast<std::size_t>(c) * n + static_cast<std::size_t>(sy) * side;
          for (int x = 0; x < x0; ++x) out[x] = T(0);
          for (int x = x0; x < x1; ++x) out[x] = src[x + dx];
          for (int x = x1; x < side; ++x) out[x] = T(0);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates column gradients into `out` (zeroed here).
template <class T>
void col2im(const T* cols, int channels, int side, T* out) {
  const int n = side * side;
  std::fill(out, out + static_cast<std::size_t>(channels) * n, T(0));
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * n;
        const int dx = kx - 1;
        const int x0 = std::max(0, -dx);
        const int x1 = std::min(side, side - dx);
        for (int y = 0; y < side; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= side) continue;
          const T* src = row + static_cast<std::size_t>(y) * side;
          T* dst = out + static_cast<std::size_t>(c) * n + static_cast<std::size_t>(sy) * side;
          for (int x = x0; x < x1; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

// 2x2 stride-2 max-pool; ties go to the first element in raster order.
template <class T>
void max_pool(const T* in, int channels, int side, T* out, std::uint32_t* argmax) {
  const int half = side / 2;
  const std::size_t n = static_cast<std::size_t>(side) * side;
  const std::size_t m = static_cast<std::size_t>(half) * half;
  for (int c = 0; c < channels; ++c) {
    const T* a = in + c * n;
    for (int py = 0; py < half; ++py) {
      for (int px = 0; px < half; ++px) {
        const std::uint32_t i0 = static_cast<std::uint32_t>(2 * py * side + 2 * px);
        const std::uint32_t candidates[4] = {i0, i0 + 1, i0 + static_cast<std::uint32_t>(side),
                                             i0 + static_cast<std::uint32_t>(side) + 1};
        std::uint32_t best = i0;
        for (int k = 1; k < 4; ++k)
          if (a[candidates[k]] > a[best]) best = candidates[k];
        const std::size_t j = c * m + static_cast<std::size_t>(py) * half + px;
        out[j] = a[best];
        if (argmax) argmax[j] = best;
      }
    }
  }
}

int block_in_channels(const NetShape& s, int block) {
  return block == 0 ? s.in_channels : s.widths[static_cast<std::size_t>(block - 1)];
}

int block_side(const NetShape& s, int block) { return s.input_size >> block; }

// Scratch buffers sized for the largest block.
template <class T>
struct Workspace {
  AlignedVector<T> cols;
  AlignedVector<T> z;
  AlignedVector<T> a;
  AlignedVector<T> b;

  explicit Workspace(const NetShape& s) {
    std::size_t cols_size = 0, act_size = 0;
    for (int k = 0; k < 4; ++k) {
      const std::size_t n = static_cast<std::size_t>(block_side(s, k)) * block_side(s, k);
      cols_size = std::max(cols_size, static_cast<std::size_t>(block_in_channels(s, k)) * 9 * n);
      act_size = std::max(act_size, static_cast<std::size_t>(s.widths[static_cast<std::size_t>(k)]) * n);
      act_size = std::max(act_size, static_cast<std::size_t>(block_in_channels(s, k)) * n);
    }
    cols.resize(cols_size);
    z.resize(act_size);
    a.resize(act_size);
    b.resize(act_size);
  }
};

// conv + bias + ReLU into ws.z (channels x side^2).
template <class T>
void conv_relu(const ConvNet<T>& net, int block, const T* input, Workspace<T>& ws) {
  const NetShape& s = net.shape();
  const int cin = block_in_channels(s, block);
  const int side = block_side(s, block);
  const int n = side * side;
  const LayerSlice L = net.layer(block);
  const T* p = net.parameters().data();
  im2col(input, cin, side, ws.cols.data());
  ConstRowMap<T> w(p + L.weight_offset, L.outputs, L.inputs);
  ConstRowMap<T> cols(ws.cols.data(), L.inputs, n);
  RowMap<T> z(ws.z.data(), L.outputs, n);
  z.noalias() = w * cols;
  z.colwise() += ConstVecMap<T>(p + L.bias_offset, L.bias_count);
  z = z.cwiseMax(T(0));
}

// Runs the conv blocks on one input and writes the flattened features.
// When `saved` is given, block inputs 1..3 and pool indices are recorded.
template <class T>
struct SampleTrace {
  std::array<AlignedVector<T>, 3> pooled;  // inputs to blocks 1..3
  std::array<std::vector<std::uint32_t>, 4> argmax;
};

template <class T>
void conv_features(const ConvNet<T>& net, const T* input, T* features, Workspace<T>& ws,
                   SampleTrace<T>* saved) {
  const NetShape& s = net.shape();
  const T* current = input;
  for (int k = 0; k < 4; ++k) {
    conv_relu(net, k, current, ws);
    const int side = block_side(s, k);
    const std::size_t pooled_size =
        static_cast<std::size_t>(s.widths[static_cast<std::size_t>(k)]) * (side / 2) * (side / 2);
    T* out = k == 3 ? features : (saved ? nullptr : (current == ws.a.data() ? ws.b.data() : ws.a.data()));
    std::uint32_t* idx = nullptr;
    if (saved) {
      saved->argmax[static_cast<std::size_t>(k)].resize(pooled_size);
      idx = saved->argmax[static_cast<std::size_t>(k)].data();
      if (k < 3) {
        saved->pooled[static_cast<std::size_t>(k)].resize(pooled_size);
        out = saved->pooled[static_cast<std::size_t>(k)].data();
      }
    }
    max_pool(ws.z.data(), s.widths[static_cast<std::size_t>(k)], side, out, idx);
    current = out;
  }
}

template <class T>
void check_batch(const ConvNet<T>& net, std::span<const T> inputs, std::span<const Vec2> targets) {
  if (targets.empty() || inputs.size() != targets.size() * net.input_length()) {
    throw InvalidArgument("batch inputs do not match the number of targets and the input size");
  }
}

// Sequential row sums; Eigen's vectorised reductions reorder by address.
template <class M, class T>
void add_row_sums(const M& m, T* out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    T acc(0);
    for (Eigen::Index c = 0; c < m.cols(); ++c) acc += m(r, c);
    out[r] += acc;
  }
}

template <class T>
T to_scalar(float v) {
  return static_cast<T>(v);
}

}  // namespace

std::size_t NetShape::parameter_count() const {
  std::size_t count = 0;
  int cin = in_channels;
  for (int w : widths) {
    count += static_cast<std::size_t>(w) * cin * 9 + w;
    cin = w;
  }
  count += static_cast<std::size_t>(hidden) * feature_size() + hidden;
  count += static_cast<std::size_t>(2) * hidden + 2;
  return count;
}

void NetShape::validate() const {
  if (in_channels < 1 || hidden < 1 || std::any_of(widths.begin(), widths.end(), [](int w) { return w < 1; })) {
    throw InvalidArgument("network dimensions must be positive");
  }
  if (input_size < 16 || input_size % 16 != 0) {
    throw InvalidArgument("network input size must be a positive multiple of 16");
  }
}

nlohmann::json to_json(const NetShape& shape) {
  return {{"in_channels", shape.in_channels},
          {"widths", shape.widths},
          {"input_size", shape.input_size},
          {"hidden", shape.hidden},
          {"parameters", shape.parameter_count()}};
}

double l2_loss(Vec2 pred, Vec2 target) {
  const Vec2 d = pred - target;
  return d.x * d.x + d.y * d.y;
}

template <class T>
ConvNet<T>::ConvNet(NetShape shape) : shape_(shape) {
  shape_.validate();
  std::size_t offset = 0;
  auto add = [&](int index, int outputs, int inputs) {
    LayerSlice& L = layers_[static_cast<std::size_t>(index)];
    L.outputs = outputs;
    L.inputs = inputs;
    L.weight_offset = offset;
    L.weight_count = static_cast<std::size_t>(outputs) * inputs;
    L.bias_offset = offset + L.weight_count;
    L.bias_count = static_cast<std::size_t>(outputs);
    offset = L.bias_offset + L.bias_count;
  };
  for (int k = 0; k < 4; ++k) add(k, shape_.widths[static_cast<std::size_t>(k)], block_in_channels(shape_, k) * 9);
  add(4, shape_.hidden, shape_.feature_size());
  add(5, 2, shape_.hidden);
  params_.assign(offset, T(0));
}

template <class T>
std::size_t ConvNet<T>::input_length() const {
  return static_cast<std::size_t>(shape_.in_channels) * shape_.input_size * shape_.input_size;
}

template <class T>
void ConvNet<T>::init_he(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::fill(params_.begin(), params_.end(), T(0));
  for (const LayerSlice& L : layers_) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / L.inputs));
    for (std::size_t i = 0; i < L.weight_count; ++i) params_[L.weight_offset + i] = static_cast<T>(dist(rng));
  }
}

template <class T>
std::array<T, 2> ConvNet<T>::forward(std::span<const T> input) const {
  if (input.size() != input_length()) throw InvalidArgument("network input has the wrong length");
  Workspace<T> ws(shape_);
  ColVec<T> features(shape_.feature_size());
  conv_features(*this, input.data(), features.data(), ws, static_cast<SampleTrace<T>*>(nullptr));

  const LayerSlice& H = layers_[4];
  const LayerSlice& O = layers_[5];
  const T* p = params_.data();
  ColVec<T> hidden = ConstRowMap<T>(p + H.weight_offset, H.outputs, H.inputs) * features;
  hidden += ConstVecMap<T>(p + H.bias_offset, H.bias_count);
  hidden = hidden.cwiseMax(T(0));
  ColVec<T> out = ConstRowMap<T>(p + O.weight_offset, O.outputs, O.inputs) * hidden;
  out += ConstVecMap<T>(p + O.bias_offset, O.bias_count);
  return {out[0], out[1]};
}

template <class T>
Vec2 ConvNet<T>::forward(const Patch& patch) const {
  if (patch.channels != shape_.in_channels) {
    throw ChannelMismatch("patch has " + std::to_string(patch.channels) + " channels but the network expects " +
                          std::to_string(shape_.in_channels));
  }
  if (patch.size != shape_.input_size || patch.samples.size() != input_length()) {
    throw InvalidArgument("patch size does not match the network input size");
  }
  std::vector<T> input(patch.samples.size());
  std::transform(patch.samples.begin(), patch.samples.end(), input.begin(), to_scalar<T>);
  const auto out = forward(std::span<const T>(input));
  return {static_cast<double>(out[0]), static_cast<double>(out[1])};
}

template <class T>
std::vector<Vec2> ConvNet<T>::forward(std::span<const Patch> patches) const {
  std::vector<Vec2> out;
  out.reserve(patches.size());
  for (const Patch& p : patches) out.push_back(forward(p));
  return out;
}

template <class T>
std::vector<T> ConvNet<T>::conv_block(int block, std::span<const T> input, int side) const {
  if (block < 0 || block > 3) throw InvalidArgument("conv block index out of range");
  const int cin = block_in_channels(shape_, block);
  if (side < 1 || input.size() != static_cast<std::size_t>(cin) * side * side) {
    throw InvalidArgument("conv block input has the wrong size");
  }
  const LayerSlice& L = layers_[static_cast<std::size_t>(block)];
  const std::size_t n = static_cast<std::size_t>(side) * side;
  AlignedVector<T> cols(static_cast<std::size_t>(L.inputs) * n);
  std::vector<T> out(static_cast<std::size_t>(L.outputs) * n);
  im2col(input.data(), cin, side, cols.data());
  RowMap<T> z(out.data(), L.outputs, static_cast<Eigen::Index>(n));
  z.noalias() = ConstRowMap<T>(params_.data() + L.weight_offset, L.outputs, L.inputs) *
                ConstRowMap<T>(cols.data(), L.inputs, static_cast<Eigen::Index>(n));
  z.colwise() += ConstVecMap<T>(params_.data() + L.bias_offset, L.bias_count);
  z = z.cwiseMax(T(0));
  return out;
}

template <class T>
double ConvNet<T>::loss(std::span<const T> inputs, std::span<const Vec2> targets) const {
  check_batch(*this, inputs, targets);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto out = forward(inputs.subspan(i * input_length(), input_length()));
    total += l2_loss({double(out[0]), double(out[1])}, targets[i]);
  }
  return total / static_cast<double>(targets.size());
}

template <class T>
double ConvNet<T>::loss_and_gradient(std::span<const T> inputs, std::span<const Vec2> targets,
                                     std::span<T> grad) const {
  check_batch(*this, inputs, targets);
  if (grad.size() != params_.size()) throw InvalidArgument("gradient buffer has the wrong size");
  std::fill(grad.begin(), grad.end(), T(0));

  const auto batch = static_cast<Eigen::Index>(targets.size());
  const std::size_t len = input_length();
  const T* p = params_.data();
  T* g = grad.data();
  Workspace<T> ws(shape_);

  // Forward: conv features per item, dense layers batched.
  std::vector<SampleTrace<T>> traces(targets.size());
  ColMat<T> x(shape_.feature_size(), batch);
  for (Eigen::Index i = 0; i < batch; ++i) {
    conv_features(*this, inputs.data() + static_cast<std::size_t>(i) * len, x.col(i).data(), ws,
                  &traces[static_cast<std::size_t>(i)]);
  }
  const LayerSlice& H = layers_[4];
  const LayerSlice& O = layers_[5];
  ConstRowMap<T> wh(p + H.weight_offset, H.outputs, H.inputs);
  ConstRowMap<T> wo(p + O.weight_offset, O.outputs, O.inputs);
  ColMat<T> h = wh * x;
  h.colwise() += ConstVecMap<T>(p + H.bias_offset, H.bias_count);
  h = h.cwiseMax(T(0));
  ColMat<T> out = wo * h;
  out.colwise() += ConstVecMap<T>(p + O.bias_offset, O.bias_count);

  double total = 0.0;
  ColMat<T> d_out(2, batch);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Vec2 t = targets[static_cast<std::size_t>(i)];
    total += l2_loss({double(out(0, i)), double(out(1, i))}, t);
    d_out(0, i) = static_cast<T>(2.0 * (double(out(0, i)) - t.x) / double(batch));
    d_out(1, i) = static_cast<T>(2.0 * (double(out(1, i)) - t.y) / double(batch));
  }

  // Dense layers.
  RowMap<T>(g + O.weight_offset, O.outputs, O.inputs).noalias() += d_out * h.transpose();
  add_row_sums(d_out, g + O.bias_offset);
  ColMat<T> d_h = wo.transpose() * d_out;
  d_h = d_h.cwiseProduct((h.array() > T(0)).template cast<T>().matrix());
  RowMap<T>(g + H.weight_offset, H.outputs, H.inputs).noalias() += d_h * x.transpose();
  add_row_sums(d_h, g + H.bias_offset);
  ColMat<T> d_x = wh.transpose() * d_h;

  // Conv blocks, item by item. ws.a holds the gradient w.r.t. the pooled
  // output of the current block, ws.b the gradient for the block input.
  for (Eigen::Index i = 0; i < batch; ++i) {
    const SampleTrace<T>& tr = traces[static_cast<std::size_t>(i)];
    const T* sample = inputs.data() + static_cast<std::size_t>(i) * len;
    const T* d_pooled = d_x.col(i).data();
    for (int k = 3; k >= 0; --k) {
      const LayerSlice& L = layers_[static_cast<std::size_t>(k)];
      const int side = block_side(shape_, k);
      const std::size_t n = static_cast<std::size_t>(side) * side;
      const std::size_t m = n / 4;
      const T* pooled = k == 3 ? x.col(i).data() : tr.pooled[static_cast<std::size_t>(k)].data();
      const std::uint32_t* idx = tr.argmax[static_cast<std::size_t>(k)].data();

      // Unpool through the argmax and the ReLU (zero gradient at 0).
      T* dz = ws.z.data();
      std::fill(dz, dz + static_cast<std::size_t>(L.outputs) * n, T(0));
      for (int c = 0; c < L.outputs; ++c) {
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t q = c * m + j;
          if (pooled[q] > T(0)) dz[c * n + idx[q]] = d_pooled[q];
        }
      }

      const T* block_input = k == 0 ? sample : tr.pooled[static_cast<std::size_t>(k - 1)].data();
      im2col(block_input, block_in_channels(shape_, k), side, ws.cols.data());
      ConstRowMap<T> dz_map(dz, L.outputs, static_cast<Eigen::Index>(n));
      RowMap<T> cols(ws.cols.data(), L.inputs, static_cast<Eigen::Index>(n));
      RowMap<T>(g + L.weight_offset, L.outputs, L.inputs).noalias() += dz_map * cols.transpose();
      add_row_sums(dz_map, g + L.bias_offset);
      if (k == 0) break;

      cols.noalias() = ConstRowMap<T>(p + L.weight_offset, L.outputs, L.inputs).transpose() * dz_map;
      col2im(ws.cols.data(), block_in_channels(shape_, k), side, ws.b.data());
      std::swap(ws.a, ws.b);
      d_pooled = ws.a.data();
    }
  }
  return total / static_cast<double>(batch);
}

template class ConvNet<float>;
template class ConvNet<double>;

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (epochs < 1) throw InvalidArgument("epochs must be at least 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument("validation fraction must be in [0, 1)");
  }
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"batch_size", cfg.batch_size},   {"learning_rate", cfg.learning_rate},
          {"epochs", cfg.epochs},           {"momentum", cfg.momentum},
          {"seed", cfg.seed},               {"validation_fraction", cfg.validation_fraction}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  TrainConfig cfg;
  cfg.batch_size = doc.value("batch_size", cfg.batch_size);
  cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
  cfg.epochs = doc.value("epochs", cfg.epochs);
  cfg.momentum = doc.value("momentum", cfg.momentum);
  cfg.seed = doc.value("seed", cfg.seed);
  cfg.validation_fraction = doc.value("validation_fraction", cfg.validation_fraction);
  return cfg;
}

int select_best_epoch(std::span<const EpochStats> history) {
  if (history.empty()) throw InvalidArgument("empty training history");
  const auto best = std::min_element(history.begin(), history.end(),
                                     [](const EpochStats& a, const EpochStats& b) { return a.val_loss < b.val_loss; });
  return best->epoch;
}

namespace {

void gather(std::span<const TrainingPair> dataset, std::span<const std::size_t> indices, std::size_t len,
            std::vector<float>& inputs, std::vector<Vec2>& targets) {
  inputs.resize(indices.size() * len);
  targets.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const TrainingPair& pair = dataset[indices[i]];
    std::copy(pair.patch.samples.begin(), pair.patch.samples.end(), inputs.begin() + static_cast<long>(i * len));
    targets[i] = pair.target;
  }
}

double evaluate(const FlowNet& net, std::span<const TrainingPair> dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i : indices) total += l2_loss(net.forward(dataset[i].patch), dataset[i].target);
  return total / static_cast<double>(indices.size());
}

}  // namespace

TrainResult train(std::span<const TrainingPair> dataset, const TrainConfig& cfg, const NetShape& shape,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  shape.validate();
  if (dataset.empty()) throw InvalidArgument("cannot train on an empty dataset");
  for (const TrainingPair& pair : dataset) {
    if (pair.patch.channels != shape.in_channels) {
      throw ChannelMismatch("training patch has " + std::to_string(pair.patch.channels) +
                            " channels but the network expects " + std::to_string(shape.in_channels));
    }
    if (pair.patch.size != shape.input_size ||
        pair.patch.samples.size() != static_cast<std::size_t>(shape.in_channels) * shape.input_size * shape.input_size) {
      throw InvalidArgument("training patch size does not match the network input size");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * double(dataset.size())));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> trn(order.begin() + static_cast<long>(n_val), order.end());
  if (trn.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw InvalidArgument("training split (" + std::to_string(trn.size()) + " pairs) is smaller than one batch");
  }

  TrainResult result{FlowNet(shape), {}, 0};
  FlowNet net(shape);
  net.init_he(rng());
  const std::size_t len = net.input_length();
  AlignedVector<float> grad(net.parameters().size());
  AlignedVector<float> velocity(net.parameters().size(), 0.0f);
  std::vector<float> inputs;
  std::vector<Vec2> targets;
  double best_loss = std::numeric_limits<double>::infinity();
  const auto lr = static_cast<float>(cfg.learning_rate);
  const auto mu = static_cast<float>(cfg.momentum);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(trn.begin(), trn.end(), rng);
    double seen_loss = 0.0;
    for (std::size_t start = 0; start < trn.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(trn.size(), start + static_cast<std::size_t>(cfg.batch_size));
      gather(dataset, std::span(trn).subspan(start, stop - start), len, inputs, targets);
      const double loss = net.loss_and_gradient(std::span<const float>(inputs), targets, grad);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", batch starting at " << start
            << " (learning rate " << cfg.learning_rate << ")";
        throw TrainingDiverged(msg.str());
      }
      seen_loss += loss * double(stop - start);
      auto w = net.parameters();
      bool finite = true;
      for (std::size_t i = 0; i < w.size(); ++i) {
        velocity[i] = mu * velocity[i] - lr * grad[i];
        w[i] += velocity[i];
        finite &= std::isfinite(w[i]);
      }
      if (!finite) {
        throw TrainingDiverged("training diverged: non-finite weights at epoch " + std::to_string(epoch));
      }
    }

    EpochStats stats{epoch, seen_loss / double(trn.size()), 0.0};
    stats.val_loss = val.empty() ? evaluate(net, dataset, trn) : evaluate(net, dataset, val);
    result.history.push_back(stats);
    if (stats.val_loss < best_loss) {
      best_loss = stats.val_loss;
      result.net = net;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(stats, net);
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  out << "epoch,train_loss,val_loss\n";
  for (const EpochStats& e : history) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
}

namespace {

constexpr char kWeightMagic[8] = {'D', 'S', 'N', 'K', 'C', 'N', 'N', '1'};
constexpr std::uint32_t kWeightVersion = 1;
constexpr std::size_t kHeaderBytes = sizeof(kWeightMagic) + 8 * sizeof(std::uint32_t) + sizeof(std::uint64_t);

}  // namespace

void save_weights(const FlowNet& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  const NetShape& s = net.shape();
  const std::uint32_t dims[8] = {kWeightVersion,
                                 static_cast<std::uint32_t>(s.in_channels),
                                 static_cast<std::uint32_t>(s.input_size),
                                 static_cast<std::uint32_t>(s.widths[0]),
                                 static_cast<std::uint32_t>(s.widths[1]),
                                 static_cast<std::uint32_t>(s.widths[2]),
                                 static_cast<std::uint32_t>(s.widths[3]),
                                 static_cast<std::uint32_t>(s.hidden)};
  const std::uint64_t count = net.parameters().size();
  out.write(kWeightMagic, sizeof(kWeightMagic));
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(net.parameters().data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  if (!out) throw FormatError("failed writing " + path.string());
}

FlowNet load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderBytes) throw FormatError("weight file is truncated: " + path.string());
  if (std::memcmp(bytes.data(), kWeightMagic, sizeof(kWeightMagic)) != 0) {
    throw FormatError("not a weight file (bad magic): " + path.string());
  }
  std::uint32_t dims[8];
  std::uint64_t count = 0;
  std::memcpy(dims, bytes.data() + sizeof(kWeightMagic), sizeof(dims));
  std::memcpy(&count, bytes.data() + sizeof(kWeightMagic) + sizeof(dims), sizeof(count));
  if (dims[0] != kWeightVersion) {
    throw FormatError("unsupported weight file version " + std::to_string(dims[0]));
  }
  NetShape shape;
  shape.in_channels = static_cast<int>(dims[1]);
  shape.input_size = static_cast<int>(dims[2]);
  for (int k = 0; k < 4; ++k) shape.widths[static_cast<std::size_t>(k)] = static_cast<int>(dims[3 + k]);
  shape.hidden = static_cast<int>(dims[7]);
  try {
    shape.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("invalid layer dimensions in weight file: ") + e.what());
  }
  if (count != shape.parameter_count()) {
    throw FormatError("weight file declares " + std::to_string(count) + " parameters, architecture needs " +
                      std::to_string(shape.parameter_count()));
  }
  if (bytes.size() != kHeaderBytes + count * sizeof(float)) {
    throw FormatError("weight file size does not match its parameter count: " + path.string());
  }
  FlowNet net(shape);
  std::memcpy(net.parameters().data(), bytes.data() + kHeaderBytes, count * sizeof(float));
  return net;
}

}  // namespace deepsnake
