#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "fieldkit/jsonio.hpp"
#include "fieldkit/raster.hpp"

namespace fieldkit::net {

struct NetworkSpec {
  int depth = 3;
  int base_filters = 8;
  int in_channels = 3;
  bool attention = true;
  int attention_depth = 2;
  /// Each head gets its own 3x3 conv tail instead of reading the shared
  /// decoder output directly.
  bool separate_heads = false;
  /// Group count for group normalization (reduced to a divisor of the width).
  int norm_groups = 4;

  void validate() const;
  /// Spatial sizes must be multiples of this.
  int size_multiple() const { return 1 << depth; }
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

Json spec_to_json(const NetworkSpec& s);
NetworkSpec spec_from_json(const Json& j);

/// Storage with a fixed 64-byte alignment. Vectorized reductions peel
/// differently depending on the address, so a fixed alignment keeps results
/// independent of where the allocator places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// C x H x W activation of one sample.
template <typename T>
struct Tensor {
  int c = 0, h = 0, w = 0;
  AlignedVector<T> data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, T fill = T(0))
      : c(c_), h(h_), w(w_), data(static_cast<std::size_t>(c_) * h_ * w_, fill) {}
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  T* channel(int k) { return data.data() + static_cast<std::size_t>(k) * plane(); }
  const T* channel(int k) const { return data.data() + static_cast<std::size_t>(k) * plane(); }
};

template <typename T>
Tensor<T> tensor_from_raster(const FloatRaster& r);

/// A learnable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;
  /// Projected onto [0, 1] after each update.
  bool unit_interval = false;
};

/// Extent, boundary and distance maps, each 1 x H x W in (0, 1).
template <typename T>
struct Outputs {
  std::array<Tensor<T>, 3> maps;
};

/// Encoder-decoder with pre-activation residual blocks, an optional
/// Tanimoto-similarity attention unit in every block and three sigmoid heads.
///
/// Attention unit: Q = sigmoid(Wq X), K = sigmoid(Wk X) (1x1 convs). The
/// channel similarity S_c compares Q_c and K_c over all pixels and the spatial
/// similarity R_p compares Q[:, p] and K[:, p] over channels, both with the
/// Tanimoto coefficient averaged over depths 0..attention_depth. The output is
/// X * (1 + g_c * S_c * R_p) with a per-channel gate g in [0, 1], initialized
/// to zero so the unit starts as the identity.
template <typename T>
class Network {
 public:
  /// Parameters are drawn from (seed, parameter name), so two specs that share
  /// a parameter name share its initial value.
  Network(const NetworkSpec& spec, std::uint64_t seed);
  ~Network();
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const NetworkSpec& spec() const;

  /// Inference when `train` is false. With `train` true, intermediate values
  /// are kept for the next backward() call.
  Outputs<T> forward(const Tensor<T>& x, bool train = false);
  /// Accumulates parameter gradients from d loss / d outputs of the last
  /// training forward pass. Returns d loss / d input.
  Tensor<T> backward(const std::array<Tensor<T>, 3>& grad_outputs);

  std::vector<Parameter<T>>& parameters();
  const std::vector<Parameter<T>>& parameters() const;
  Parameter<T>* find(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();
  /// Applies parameter constraints (attention gates into [0, 1]).
  void project();

  /// Copies every parameter value from `other` (same names and shapes).
  template <typename U>
  void copy_values_from(const Network<U>& other);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  template <typename U>
  friend class Network;
};

struct Provenance {
  std::string train_dataset_id;
  int epoch = 0;
  double val_mcc = 0.0;
  std::optional<std::string> parent_checkpoint_id;
};

/// Spec, provenance and float32 parameter values.
struct Checkpoint {
  NetworkSpec spec;
  Provenance provenance;
  std::vector<std::string> names;
  std::vector<std::vector<int>> shapes;
  std::vector<std::vector<float>> values;

  /// Content hash of spec and parameter bytes, hex.
  std::string id() const;
};

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, const Provenance& prov);
/// Builds a network from a checkpoint (all parameters loaded).
Network<float> network_from_checkpoint(const Checkpoint& ck);
template <typename T>
void load_parameters(Network<T>& net, const Checkpoint& ck);

// On disk: "<stem>.json" holds {spec, provenance, id, tensors: [{name, shape,
// dtype, offset}]}, "<stem>.bin" the little-endian float32 values.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& stem);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

}  // namespace fieldkit::net
