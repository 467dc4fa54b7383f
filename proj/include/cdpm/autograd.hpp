#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace cdpm::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Tape-based reverse-mode differentiation over double tensors.
///
/// Nodes are appended in evaluation order, so replaying the tape backwards
/// is a valid topological order. Feature maps use [N, C, H, W] layout with N
/// the slice axis; vectors per slice use [N, C].
///
/// A graph built with record = false keeps only forward values (inference).
class Graph {
 public:
  using Id = std::size_t;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Id constant(Shape shape, std::vector<double> value);
  /// Leaf bound to externally owned storage. When `grad_sink` is non-null
  /// the accumulated gradient is added into it by backward().
  Id parameter(const Shape& shape, const std::vector<double>& value,
               std::vector<double>* grad_sink);

  const Shape& shape(Id id) const { return nodes_[id].shape; }
  const std::vector<double>& value(Id id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool needs_grad(Id id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer, allocated on first access.
  std::vector<double>& grad(Id id);

  /// Result node of an op. `backward` is dropped unless recording and at
  /// least one input needs a gradient.
  Id add_node(Shape shape, std::vector<double> value, std::initializer_list<Id> inputs,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 for a one-element node and replays the tape.
  void backward(Id loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    const std::vector<double>* external = nullptr;
    std::vector<double> grad;
    std::function<void()> backward;
    std::vector<double>* sink = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool record_;
};

/// Differentiable operations. Every op validates its input shapes and
/// throws std::invalid_argument on mismatch.
namespace ops {

using Id = Graph::Id;

/// Stride-1 convolution with zero "same" padding; weight [Cout, Cin, k, k].
Id conv2d(Graph& g, Id x, Id weight, Id bias);
/// Per-slice group normalization over (C / groups) * H * W elements.
Id group_norm(Graph& g, Id x, Id gamma, Id beta, std::size_t groups, double eps = 1e-5);
Id silu(Graph& g, Id x);
Id add(Graph& g, Id a, Id b);
/// x [N, C, H, W] plus v [M, C] broadcast over space, M in {1, N}.
Id add_channel_bias(Graph& g, Id x, Id v);
/// x [N, in] times weight [out, in] transposed plus bias [out].
Id linear(Graph& g, Id x, Id weight, Id bias);
Id concat_channels(Graph& g, Id a, Id b);
Id avg_pool2(Graph& g, Id x);
Id upsample2(Graph& g, Id x);
/// Rows of table [R, E] selected by `rows`, giving [len(rows), E].
Id gather_rows(Graph& g, Id table, const std::vector<std::size_t>& rows);
/// Slices along the leading axis selected by `positions`.
Id select_slices(Graph& g, Id x, const std::vector<std::size_t>& positions);

struct AttentionWeights {
  Id wq, bq, wk, bk, wv, bv, wo, bo;  // [C, C] and [C]
};
/// Multi-head self-attention across the N slices, independently at every
/// spatial position: tokens are the C-channel feature vectors of the N
/// slices at one (h, w). Projections are shared across positions.
Id slice_attention(Graph& g, Id x, const AttentionWeights& w, std::size_t heads);

/// Mean of (pred - target)^2 over all elements; one-element result.
Id mse(Graph& g, Id pred, const std::vector<double>& target);

}  // namespace ops
}  // namespace cdpm::nn
