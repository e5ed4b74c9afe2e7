#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "edgevtp/rng.hpp"
#include "edgevtp/tensor.hpp"

namespace edgevtp {

struct BezierBasis;

enum class Op : uint8_t {
    Leaf,
    Matmul,
    MatmulBT,
    Add,
    Sub,
    Mul,
    AddRow,
    AddConst,
    Scale,
    ScalarMul,
    LeakyRelu,
    SoftmaxRows,
    LayerNorm,
    Dropout,
    ConcatCols,
    SliceCols,
    BlockRows,
    TileRows,
    Sum,
    GinAggregate,
    BlockCrossAttention,
    BezierSample,
    MaskedL2,
};

// One recorded operation. Nodes are appended in execution order, so the
// tape is a DAG where inputs always precede their consumers; backward is
// a single reverse sweep over node ids.
struct TapeNode {
    Op op = Op::Leaf;
    std::array<int, 3> in{-1, -1, -1};
    Tensor val;   // forward output
    Tensor grad;  // accumulator, allocated lazily during backward
    bool requires_grad = false;

    double a = 0.0;      // scalar attribute (slope, scale, dropout rate)
    int p0 = 0, p1 = 0;  // integer attributes (slice/block bounds, seq length)
    Tensor aux;          // saved forward values needed for backward
    const std::vector<std::vector<int>>* lists = nullptr;  // non-owning; caller outlives tape
    const BezierBasis* basis = nullptr;                    // non-owning
};

// Reverse-mode tape over dense f64 tensors. Single-threaded; one tape per
// forward/backward pass. backward() may be called once per recorded loss.
class Tape {
  public:
    int leaf(Tensor value, bool requires_grad = false);

    int matmul(int a, int b);     // A·B
    int matmul_bt(int a, int b);  // A·Bᵀ
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);  // elementwise
    int add_row(int a, int row);
    int add_const(int a, Tensor c);
    int scale(int a, double c);
    int scalar_mul(int a, int s);  // s is a 1-element node
    int leaky_relu(int a, double slope);
    int softmax_rows(int a);
    int layer_norm(int x, int gamma, int beta, double eps = 1e-5);
    int dropout(int a, double rate, Rng& rng);
    int concat_cols(int a, int b);
    int slice_cols(int a, int c0, int c1);
    int block_rows(int a, int r0, int nrows);
    int tile_rows(int a, int n);
    int sum(int a);

    // z_i = h_i + Σ_{j in lists[i]} h_j  (GIN sum aggregation, ε = 0)
    int gin_aggregate(int h, const std::vector<std::vector<int>>* lists);

    // Per-row cross attention over per-row key/value blocks of length
    // seq_len: out.row(i) = softmax(q.row(i)·K_iᵀ/√d)·V_i where K_i/V_i are
    // rows [i*seq_len, (i+1)*seq_len) of k/v.
    int block_cross_attention(int q, int k, int v, int seq_len);

    // softmax(q·kᵀ/√d)·v composed from the primitive ops above.
    int attention(int q, int k, int v);

    // offsets {N,8} + constant anchors {N,2} -> curve samples {N, 2*T_out}.
    int bezier_sample(int offsets, Tensor anchors, const BezierBasis* basis);

    // (1/(N·T_out)) Σ_i Σ_k m_ik ‖pred_ik − target_ik‖²; mask {N,T_out}.
    int masked_l2(int pred, int target, Tensor mask);

    void backward(int loss_node);

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }
    const TapeNode& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    int push(TapeNode&& node);
    Tensor& grad_buf(int id);
    void backprop_node(int id);

    std::vector<TapeNode> nodes_;
};

// Tape-free evaluation of softmax(q·kᵀ/√d)·v, shared by tests and callers
// that do not need gradients.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace edgevtp
