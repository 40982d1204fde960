#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <new>
#include <span>
#include <vector>

#include <json.hpp>

#include "deepsnake/patchdata.hpp"
#include "deepsnake/vec2.hpp"

namespace deepsnake {

/// Allocator returning 64-byte aligned storage. Vectorised kernels choose
/// their code path from the buffer address, so aligned buffers keep
/// floating-point results independent of where the heap places them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Architecture of the flow regressor: four 3x3/pad-1 conv blocks (ReLU,
/// 2x2 max-pool) followed by a ReLU hidden layer and a 2-output linear head.
struct NetShape {
  int in_channels = 1;
  std::array<int, 4> widths{32, 64, 128, 256};
  int input_size = kPatchSize;
  int hidden = 2048;

  /// Side of the last pooled feature map (input_size / 16).
  int feature_side() const { return input_size / 16; }
  /// Length of the flattened feature vector fed to the hidden layer.
  int feature_size() const { return feature_side() * feature_side() * widths[3]; }
  std::size_t parameter_count() const;
  /// Throws InvalidArgument for non-positive sizes or input_size not a multiple of 16.
  void validate() const;

  bool operator==(const NetShape&) const = default;
};

nlohmann::json to_json(const NetShape& shape);

/// Loss of a single prediction: squared Euclidean distance.
double l2_loss(Vec2 pred, Vec2 target);

/// Flat parameter layout: for each of the six layers (conv1..conv4, hidden,
/// output) a row-major weight matrix (out x in, conv inputs ordered as
/// channel, ky, kx) followed by its bias vector.
struct LayerSlice {
  std::size_t weight_offset;
  std::size_t weight_count;
  std::size_t bias_offset;
  std::size_t bias_count;
  int outputs;
  int inputs;
};

/// Activations and patches are channel-major (CHW). Inputs to the batched
/// calls are `count` such tensors stored back to back.
template <class T>
class ConvNet {
 public:
  static constexpr int kLayers = 6;

  /// All parameters zero.
  explicit ConvNet(NetShape shape = {});

  const NetShape& shape() const { return shape_; }
  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  LayerSlice layer(int index) const { return layers_.at(static_cast<std::size_t>(index)); }
  std::size_t input_length() const;

  /// He-normal weights (std sqrt(2 / fan_in)) and zero biases.
  void init_he(std::uint64_t seed);

  /// Per-item inference; results do not depend on how items are batched.
  Vec2 forward(const Patch& patch) const;
  std::vector<Vec2> forward(std::span<const Patch> patches) const;
  std::array<T, 2> forward(std::span<const T> input) const;

  /// Pre-pool ReLU output (channels x side^2) of conv block `block` for an
  /// input of `side` x `side` with the block's input channel count.
  std::vector<T> conv_block(int block, std::span<const T> input, int side) const;

  /// Mean L2 loss over the batch and its exact gradient (written to `grad`,
  /// same layout as parameters()).
  double loss_and_gradient(std::span<const T> inputs, std::span<const Vec2> targets,
                           std::span<T> grad) const;

  /// Mean L2 loss over the batch.
  double loss(std::span<const T> inputs, std::span<const Vec2> targets) const;

 private:
  NetShape shape_;
  std::array<LayerSlice, kLayers> layers_;
  AlignedVector<T> params_;
};

extern template class ConvNet<float>;
extern template class ConvNet<double>;

using FlowNet = ConvNet<float>;

struct TrainConfig {
  int batch_size = 128;
  /// Larger rates diverge with the unnormalised L2 loss on this architecture.
  double learning_rate = 3e-4;
  int epochs = 20;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Share of the (shuffled) dataset held out for model selection. With no
  /// held-out pairs the selection loss is the loss on the training split.
  double validation_fraction = 0.1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& doc);

struct EpochStats {
  int epoch;  // 1-based
  /// Mean of the minibatch losses seen during the epoch.
  double train_loss;
  /// Loss of the end-of-epoch weights on the validation split.
  double val_loss;
};

/// 1-based epoch with the lowest validation loss; the earliest wins ties.
int select_best_epoch(std::span<const EpochStats> history);

struct TrainResult {
  FlowNet net;
  std::vector<EpochStats> history;
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochStats&, const FlowNet&)>;

/// Momentum SGD (v <- m v - lr g, w <- w + v) on the mean L2 loss. The
/// dataset is split once, reshuffled every epoch, and the snapshot with the
/// lowest validation loss is returned. Throws InvalidArgument for an empty
/// dataset or one smaller than a batch, ChannelMismatch for inconsistent
/// patches and TrainingDiverged for non-finite losses or weights.
TrainResult train(std::span<const TrainingPair> dataset, const TrainConfig& cfg,
                  const NetShape& shape, const EpochCallback& on_epoch = {});

void write_history_csv(const std::filesystem::path& path, std::span<const EpochStats> history);

// Weight file: "DSNKCNN1" magic, u32 version, u32 in_channels, input_size,
// four widths and hidden size, u64 parameter count, then little-endian f32
// parameters in the flat layout.
void save_weights(const FlowNet& net, const std::filesystem::path& path);
/// Throws FormatError for a bad magic, version, dimensions, parameter count
/// or a truncated file.
FlowNet load_weights(const std::filesystem::path& path);

}  // namespace deepsnake
