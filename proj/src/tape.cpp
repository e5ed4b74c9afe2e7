#include "edgevtp/tape.hpp"

#include <cmath>
#include <string>

#include "edgevtp/curve_head.hpp"
#include "edgevtp/error.hpp"

namespace edgevtp {

namespace {

void check_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) throw_dimension(std::string(who) + ": expected 2-D tensor, got " + t.shape_str());
}

// C += A·B
void mm_nn_acc(const Tensor& A, const Tensor& B, Tensor& C) {
    const int m = A.rows(), k = A.cols(), n = B.cols();
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        double* ci = c + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C += A·Bᵀ
void mm_nt_acc(const Tensor& A, const Tensor& B, Tensor& C) {
    const int m = A.rows(), k = A.cols(), n = B.rows();
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        double* ci = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<int64_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C += Aᵀ·B
void mm_tn_acc(const Tensor& A, const Tensor& B, Tensor& C) {
    const int k = A.rows(), m = A.cols(), n = B.cols();
    const double* a = A.data();
    const double* b = B.data();
    double* c = C.data();
    for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<int64_t>(p) * m;
        const double* bp = b + static_cast<int64_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void softmax_row_inplace(double* x, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) x[j] *= inv;
}

}  // namespace

int Tape::push(TapeNode&& node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buf(int id) {
    TapeNode& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.val.shape());
    return n.grad;
}

const Tensor& Tape::grad(int id) const {
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) throw_contract("tape: gradient not populated for node " + std::to_string(id));
    return n.grad;
}

int Tape::leaf(Tensor value, bool requires_grad) {
    TapeNode n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check_2d(A, "matmul");
    check_2d(B, "matmul");
    if (A.cols() != B.rows())
        throw_dimension("matmul: inner dimensions disagree, " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::Matmul;
    n.in = {a, b, -1};
    n.val = Tensor({A.rows(), B.cols()});
    mm_nn_acc(A, B, n.val);
    return push(std::move(n));
}

int Tape::matmul_bt(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check_2d(A, "matmul_bt");
    check_2d(B, "matmul_bt");
    if (A.cols() != B.cols())
        throw_dimension("matmul_bt: inner dimensions disagree, " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::MatmulBT;
    n.in = {a, b, -1};
    n.val = Tensor({A.rows(), B.rows()});
    mm_nt_acc(A, B, n.val);
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
        throw_dimension("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::Add;
    n.in = {a, b, -1};
    n.val = A;
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] += B[i];
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
        throw_dimension("sub: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::Sub;
    n.in = {a, b, -1};
    n.val = A;
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] -= B[i];
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
        throw_dimension("mul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::Mul;
    n.in = {a, b, -1};
    n.val = A;
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] *= B[i];
    return push(std::move(n));
}

int Tape::add_row(int a, int row) {
    const Tensor& A = value(a);
    const Tensor& R = value(row);
    check_2d(A, "add_row");
    if (R.size() != A.cols())
        throw_dimension("add_row: row " + R.shape_str() + " vs matrix " + A.shape_str());
    TapeNode n;
    n.op = Op::AddRow;
    n.in = {a, row, -1};
    n.val = A;
    const int rows = A.rows(), cols = A.cols();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) n.val.at(i, j) += R[j];
    return push(std::move(n));
}

int Tape::add_const(int a, Tensor c) {
    const Tensor& A = value(a);
    if (A.size() != c.size())
        throw_dimension("add_const: shape mismatch " + A.shape_str() + " vs " + c.shape_str());
    TapeNode n;
    n.op = Op::AddConst;
    n.in = {a, -1, -1};
    n.val = A;
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] += c[i];
    n.aux = std::move(c);
    return push(std::move(n));
}

int Tape::scale(int a, double c) {
    TapeNode n;
    n.op = Op::Scale;
    n.in = {a, -1, -1};
    n.a = c;
    n.val = value(a);
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] *= c;
    return push(std::move(n));
}

int Tape::scalar_mul(int a, int s) {
    const Tensor& S = value(s);
    if (S.size() != 1) throw_dimension("scalar_mul: gate must be 1-element, got " + S.shape_str());
    TapeNode n;
    n.op = Op::ScalarMul;
    n.in = {a, s, -1};
    n.val = value(a);
    const double sv = S[0];
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] *= sv;
    return push(std::move(n));
}

int Tape::leaky_relu(int a, double slope) {
    if (!(slope > 0.0 && slope < 1.0))
        throw_contract("leaky_relu: slope must be in (0,1), got " + std::to_string(slope));
    TapeNode n;
    n.op = Op::LeakyRelu;
    n.in = {a, -1, -1};
    n.a = slope;
    n.val = value(a);
    for (int64_t i = 0; i < n.val.size(); ++i)
        if (n.val[i] < 0.0) n.val[i] *= slope;
    return push(std::move(n));
}

int Tape::softmax_rows(int a) {
    const Tensor& A = value(a);
    check_2d(A, "softmax_rows");
    TapeNode n;
    n.op = Op::SoftmaxRows;
    n.in = {a, -1, -1};
    n.val = A;
    const int rows = A.rows(), cols = A.cols();
    for (int i = 0; i < rows; ++i) softmax_row_inplace(n.val.data() + static_cast<int64_t>(i) * cols, cols);
    return push(std::move(n));
}

int Tape::layer_norm(int x, int gamma, int beta, double eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    check_2d(X, "layer_norm");
    if (G.size() != X.cols() || B.size() != X.cols())
        throw_dimension("layer_norm: gamma/beta size must match feature dim " + std::to_string(X.cols()));
    TapeNode n;
    n.op = Op::LayerNorm;
    n.in = {x, gamma, beta};
    n.val = Tensor(X.shape());
    n.aux = Tensor({X.rows(), 2});  // per-row mean, inv-stddev
    const int rows = X.rows(), cols = X.cols();
    for (int i = 0; i < rows; ++i) {
        const double* xi = X.data() + static_cast<int64_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += xi[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        n.aux.at(i, 0) = mean;
        n.aux.at(i, 1) = inv;
        double* yi = n.val.data() + static_cast<int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) yi[j] = G[j] * (xi[j] - mean) * inv + B[j];
    }
    return push(std::move(n));
}

int Tape::dropout(int a, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw_contract("dropout: rate must be in [0,1), got " + std::to_string(rate));
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::Dropout;
    n.in = {a, -1, -1};
    n.a = rate;
    n.aux = Tensor(A.shape());  // inverted-dropout mask
    const double keep = 1.0 - rate;
    for (int64_t i = 0; i < n.aux.size(); ++i) n.aux[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    n.val = A;
    for (int64_t i = 0; i < n.val.size(); ++i) n.val[i] *= n.aux[i];
    return push(std::move(n));
}

int Tape::concat_cols(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check_2d(A, "concat_cols");
    check_2d(B, "concat_cols");
    if (A.rows() != B.rows())
        throw_dimension("concat_cols: row mismatch " + A.shape_str() + " vs " + B.shape_str());
    TapeNode n;
    n.op = Op::ConcatCols;
    n.in = {a, b, -1};
    n.val = Tensor({A.rows(), A.cols() + B.cols()});
    for (int i = 0; i < A.rows(); ++i) {
        for (int j = 0; j < A.cols(); ++j) n.val.at(i, j) = A.at(i, j);
        for (int j = 0; j < B.cols(); ++j) n.val.at(i, A.cols() + j) = B.at(i, j);
    }
    return push(std::move(n));
}

int Tape::slice_cols(int a, int c0, int c1) {
    const Tensor& A = value(a);
    check_2d(A, "slice_cols");
    if (c0 < 0 || c1 > A.cols() || c0 >= c1)
        throw_dimension("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                        ") invalid for " + A.shape_str());
    TapeNode n;
    n.op = Op::SliceCols;
    n.in = {a, -1, -1};
    n.p0 = c0;
    n.p1 = c1;
    n.val = Tensor({A.rows(), c1 - c0});
    for (int i = 0; i < A.rows(); ++i)
        for (int j = c0; j < c1; ++j) n.val.at(i, j - c0) = A.at(i, j);
    return push(std::move(n));
}

int Tape::block_rows(int a, int r0, int nrows) {
    const Tensor& A = value(a);
    check_2d(A, "block_rows");
    if (r0 < 0 || r0 + nrows > A.rows() || nrows <= 0)
        throw_dimension("block_rows: range invalid for " + A.shape_str());
    TapeNode n;
    n.op = Op::BlockRows;
    n.in = {a, -1, -1};
    n.p0 = r0;
    n.p1 = nrows;
    n.val = Tensor({nrows, A.cols()});
    const int cols = A.cols();
    for (int i = 0; i < nrows; ++i)
        for (int j = 0; j < cols; ++j) n.val.at(i, j) = A.at(r0 + i, j);
    return push(std::move(n));
}

int Tape::tile_rows(int a, int nrows) {
    const Tensor& A = value(a);
    check_2d(A, "tile_rows");
    if (A.rows() != 1) throw_dimension("tile_rows: expected a single row, got " + A.shape_str());
    TapeNode n;
    n.op = Op::TileRows;
    n.in = {a, -1, -1};
    n.p0 = nrows;
    n.val = Tensor({nrows, A.cols()});
    for (int i = 0; i < nrows; ++i)
        for (int j = 0; j < A.cols(); ++j) n.val.at(i, j) = A.at(0, j);
    return push(std::move(n));
}

int Tape::sum(int a) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::Sum;
    n.in = {a, -1, -1};
    double s = 0.0;
    for (int64_t i = 0; i < A.size(); ++i) s += A[i];
    n.val = Tensor::scalar(s);
    return push(std::move(n));
}

int Tape::gin_aggregate(int h, const std::vector<std::vector<int>>* lists) {
    const Tensor& H = value(h);
    check_2d(H, "gin_aggregate");
    if (static_cast<int>(lists->size()) != H.rows())
        throw_dimension("gin_aggregate: " + std::to_string(lists->size()) + " neighbor lists for " +
                        std::to_string(H.rows()) + " rows");
    TapeNode n;
    n.op = Op::GinAggregate;
    n.in = {h, -1, -1};
    n.lists = lists;
    n.val = H;
    const int cols = H.cols();
    for (int i = 0; i < H.rows(); ++i) {
        double* out = n.val.data() + static_cast<int64_t>(i) * cols;
        for (int j : (*lists)[static_cast<size_t>(i)]) {
            if (j < 0 || j >= H.rows()) throw_contract("gin_aggregate: neighbor index out of range");
            const double* hj = H.data() + static_cast<int64_t>(j) * cols;
            for (int c = 0; c < cols; ++c) out[c] += hj[c];
        }
    }
    return push(std::move(n));
}

int Tape::block_cross_attention(int q, int k, int v, int seq_len) {
    const Tensor& Q = value(q);
    const Tensor& K = value(k);
    const Tensor& V = value(v);
    check_2d(Q, "block_cross_attention");
    const int n_rows = Q.rows(), d = Q.cols();
    if (d == 0) throw_dimension("block_cross_attention: zero feature dimension");
    if (K.rows() != n_rows * seq_len || V.rows() != n_rows * seq_len || K.cols() != d || V.cols() != d)
        throw_dimension("block_cross_attention: inconsistent shapes q=" + Q.shape_str() + " k=" +
                        K.shape_str() + " v=" + V.shape_str());
    TapeNode n;
    n.op = Op::BlockCrossAttention;
    n.in = {q, k, v};
    n.p0 = seq_len;
    n.a = 1.0 / std::sqrt(static_cast<double>(d));
    n.val = Tensor({n_rows, d});
    n.aux = Tensor({n_rows, seq_len});  // attention probabilities
    for (int i = 0; i < n_rows; ++i) {
        const double* qi = Q.data() + static_cast<int64_t>(i) * d;
        double* pi = n.aux.data() + static_cast<int64_t>(i) * seq_len;
        for (int t = 0; t < seq_len; ++t) {
            const double* kt = K.data() + (static_cast<int64_t>(i) * seq_len + t) * d;
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += qi[c] * kt[c];
            pi[t] = s * n.a;
        }
        softmax_row_inplace(pi, seq_len);
        double* out = n.val.data() + static_cast<int64_t>(i) * d;
        for (int t = 0; t < seq_len; ++t) {
            const double* vt = V.data() + (static_cast<int64_t>(i) * seq_len + t) * d;
            for (int c = 0; c < d; ++c) out[c] += pi[t] * vt[c];
        }
    }
    return push(std::move(n));
}

int Tape::attention(int q, int k, int v) {
    const Tensor& Q = value(q);
    const Tensor& K = value(k);
    const Tensor& V = value(v);
    check_2d(Q, "attention");
    check_2d(K, "attention");
    check_2d(V, "attention");
    const int d = Q.cols();
    if (d == 0) throw_dimension("attention: zero feature dimension");
    if (K.cols() != d) throw_dimension("attention: q/k dim mismatch " + Q.shape_str() + " vs " + K.shape_str());
    if (K.rows() != V.rows())
        throw_dimension("attention: k/v length mismatch " + K.shape_str() + " vs " + V.shape_str());
    int scores = matmul_bt(q, k);
    int scaled = scale(scores, 1.0 / std::sqrt(static_cast<double>(d)));
    int probs = softmax_rows(scaled);
    return matmul(probs, v);
}

int Tape::bezier_sample(int offsets, Tensor anchors, const BezierBasis* basis) {
    const Tensor& O = value(offsets);
    check_2d(O, "bezier_sample");
    const int n_rows = O.rows();
    if (O.cols() != 8) throw_dimension("bezier_sample: expected {N,8} offsets, got " + O.shape_str());
    if (anchors.rows() != n_rows || anchors.cols() != 2)
        throw_dimension("bezier_sample: anchors " + anchors.shape_str() + " for " + std::to_string(n_rows) +
                        " vehicles");
    TapeNode n;
    n.op = Op::BezierSample;
    n.in = {offsets, -1, -1};
    n.basis = basis;
    const int t_out = basis->t_out;
    n.val = Tensor({n_rows, 2 * t_out});
    for (int i = 0; i < n_rows; ++i) {
        double px[5], py[5];
        px[0] = anchors.at(i, 0);
        py[0] = anchors.at(i, 1);
        for (int kk = 1; kk <= 4; ++kk) {
            px[kk] = px[0] + O.at(i, 2 * (kk - 1));
            py[kk] = py[0] + O.at(i, 2 * (kk - 1) + 1);
        }
        for (int s = 0; s < t_out; ++s) {
            const double* w = basis->weights.data() + static_cast<int64_t>(s) * 5;
            double x = 0.0, y = 0.0;
            for (int kk = 0; kk < 5; ++kk) {
                x += w[kk] * px[kk];
                y += w[kk] * py[kk];
            }
            n.val.at(i, 2 * s) = x;
            n.val.at(i, 2 * s + 1) = y;
        }
    }
    n.aux = std::move(anchors);
    return push(std::move(n));
}

int Tape::masked_l2(int pred, int target, Tensor mask) {
    const Tensor& P = value(pred);
    const Tensor& T = value(target);
    if (!P.same_shape(T))
        throw_dimension("masked_l2: pred " + P.shape_str() + " vs target " + T.shape_str());
    const int n_rows = mask.rows();
    const int t_out = mask.cols();
    if (P.size() != static_cast<int64_t>(n_rows) * t_out * 2)
        throw_dimension("masked_l2: mask " + mask.shape_str() + " incompatible with pred " + P.shape_str());
    TapeNode n;
    n.op = Op::MaskedL2;
    n.in = {pred, target, -1};
    double acc = 0.0;
    for (int i = 0; i < n_rows; ++i) {
        for (int s = 0; s < t_out; ++s) {
            const int64_t base = (static_cast<int64_t>(i) * t_out + s) * 2;
            const double dx = P[base] - T[base];
            const double dy = P[base + 1] - T[base + 1];
            acc += mask.at(i, s) * (dx * dx + dy * dy);
        }
    }
    // Denominator counts every prediction slot, masked or not.
    n.val = Tensor::scalar(acc / (static_cast<double>(n_rows) * t_out));
    n.aux = std::move(mask);
    return push(std::move(n));
}

void Tape::backward(int loss_node) {
    const Tensor& loss = value(loss_node);
    if (loss.size() != 1)
        throw_contract("backward: loss must be scalar-shaped, got " + loss.shape_str());
    grad_buf(loss_node)[0] = 1.0;
    for (int id = loss_node; id >= 0; --id) {
        if (nodes_[static_cast<size_t>(id)].grad.empty()) continue;
        backprop_node(id);
    }
}

void Tape::backprop_node(int id) {
    TapeNode& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Matmul: {
            const Tensor& A = value(n.in[0]);
            const Tensor& B = value(n.in[1]);
            mm_nt_acc(g, B, grad_buf(n.in[0]));
            mm_tn_acc(A, g, grad_buf(n.in[1]));
            break;
        }
        case Op::MatmulBT: {
            const Tensor& A = value(n.in[0]);
            const Tensor& B = value(n.in[1]);
            mm_nn_acc(g, B, grad_buf(n.in[0]));
            mm_tn_acc(g, A, grad_buf(n.in[1]));
            break;
        }
        case Op::Add: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (int64_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (int64_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            const Tensor& A = value(n.in[0]);
            const Tensor& B = value(n.in[1]);
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            for (int64_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * B[i];
                gb[i] += g[i] * A[i];
            }
            break;
        }
        case Op::AddRow: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gr = grad_buf(n.in[1]);
            const int rows = n.val.rows(), cols = n.val.cols();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    ga.at(i, j) += g.at(i, j);
                    gr[j] += g.at(i, j);
                }
            break;
        }
        case Op::AddConst:
        case Op::Dropout: {
            Tensor& ga = grad_buf(n.in[0]);
            if (n.op == Op::Dropout) {
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.aux[i];
            } else {
                for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            break;
        }
        case Op::Scale: {
            Tensor& ga = grad_buf(n.in[0]);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.a;
            break;
        }
        case Op::ScalarMul: {
            const Tensor& A = value(n.in[0]);
            const double sv = value(n.in[1])[0];
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gs = grad_buf(n.in[1]);
            for (int64_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * sv;
                gs[0] += g[i] * A[i];
            }
            break;
        }
        case Op::LeakyRelu: {
            const Tensor& A = value(n.in[0]);
            Tensor& ga = grad_buf(n.in[0]);
            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (A[i] > 0.0 ? 1.0 : n.a);
            break;
        }
        case Op::SoftmaxRows: {
            Tensor& ga = grad_buf(n.in[0]);
            const int rows = n.val.rows(), cols = n.val.cols();
            for (int i = 0; i < rows; ++i) {
                const double* s = n.val.data() + static_cast<int64_t>(i) * cols;
                const double* gi = g.data() + static_cast<int64_t>(i) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += gi[j] * s[j];
                double* out = ga.data() + static_cast<int64_t>(i) * cols;
                for (int j = 0; j < cols; ++j) out[j] += s[j] * (gi[j] - dot);
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& X = value(n.in[0]);
            const Tensor& G = value(n.in[1]);
            Tensor& gx = grad_buf(n.in[0]);
            Tensor& gg = grad_buf(n.in[1]);
            Tensor& gb = grad_buf(n.in[2]);
            const int rows = X.rows(), cols = X.cols();
            for (int i = 0; i < rows; ++i) {
                const double mean = n.aux.at(i, 0);
                const double inv = n.aux.at(i, 1);
                const double* xi = X.data() + static_cast<int64_t>(i) * cols;
                const double* gi = g.data() + static_cast<int64_t>(i) * cols;
                double m1 = 0.0, m2 = 0.0;  // means of γ⊙g and γ⊙g⊙x̂
                for (int j = 0; j < cols; ++j) {
                    const double xh = (xi[j] - mean) * inv;
                    const double dg = gi[j] * G[j];
                    m1 += dg;
                    m2 += dg * xh;
                    gg[j] += gi[j] * xh;
                    gb[j] += gi[j];
                }
                m1 /= cols;
                m2 /= cols;
                double* out = gx.data() + static_cast<int64_t>(i) * cols;
                for (int j = 0; j < cols; ++j) {
                    const double xh = (xi[j] - mean) * inv;
                    out[j] += inv * (gi[j] * G[j] - m1 - xh * m2);
                }
            }
            break;
        }
        case Op::ConcatCols: {
            Tensor& ga = grad_buf(n.in[0]);
            Tensor& gb = grad_buf(n.in[1]);
            const int rows = n.val.rows();
            const int ca = ga.cols(), cb = gb.cols();
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < ca; ++j) ga.at(i, j) += g.at(i, j);
                for (int j = 0; j < cb; ++j) gb.at(i, j) += g.at(i, ca + j);
            }
            break;
        }
        case Op::SliceCols: {
            Tensor& ga = grad_buf(n.in[0]);
            for (int i = 0; i < n.val.rows(); ++i)
                for (int j = 0; j < n.val.cols(); ++j) ga.at(i, n.p0 + j) += g.at(i, j);
            break;
        }
        case Op::BlockRows: {
            Tensor& ga = grad_buf(n.in[0]);
            for (int i = 0; i < n.val.rows(); ++i)
                for (int j = 0; j < n.val.cols(); ++j) ga.at(n.p0 + i, j) += g.at(i, j);
            break;
        }
        case Op::TileRows: {
            Tensor& ga = grad_buf(n.in[0]);
            for (int i = 0; i < n.val.rows(); ++i)
                for (int j = 0; j < n.val.cols(); ++j) ga.at(0, j) += g.at(i, j);
            break;
        }
        case Op::Sum: {
            Tensor& ga = grad_buf(n.in[0]);
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
            break;
        }
        case Op::GinAggregate: {
            Tensor& gh = grad_buf(n.in[0]);
            const int cols = n.val.cols();
            for (int i = 0; i < n.val.rows(); ++i) {
                const double* gi = g.data() + static_cast<int64_t>(i) * cols;
                double* self = gh.data() + static_cast<int64_t>(i) * cols;
                for (int c = 0; c < cols; ++c) self[c] += gi[c];
                for (int j : (*n.lists)[static_cast<size_t>(i)]) {
                    double* gj = gh.data() + static_cast<int64_t>(j) * cols;
                    for (int c = 0; c < cols; ++c) gj[c] += gi[c];
                }
            }
            break;
        }
        case Op::BlockCrossAttention: {
            const Tensor& Q = value(n.in[0]);
            const Tensor& K = value(n.in[1]);
            const Tensor& V = value(n.in[2]);
            Tensor& gq = grad_buf(n.in[0]);
            Tensor& gk = grad_buf(n.in[1]);
            Tensor& gv = grad_buf(n.in[2]);
            const int n_rows = Q.rows(), d = Q.cols(), seq = n.p0;
            std::vector<double> dp(static_cast<size_t>(seq));
            for (int i = 0; i < n_rows; ++i) {
                const double* gi = g.data() + static_cast<int64_t>(i) * d;
                const double* pi = n.aux.data() + static_cast<int64_t>(i) * seq;
                double dot = 0.0;
                for (int t = 0; t < seq; ++t) {
                    const int64_t row = static_cast<int64_t>(i) * seq + t;
                    const double* vt = V.data() + row * d;
                    double* gvt = gv.data() + row * d;
                    double s = 0.0;
                    for (int c = 0; c < d; ++c) {
                        s += gi[c] * vt[c];
                        gvt[c] += pi[t] * gi[c];
                    }
                    dp[static_cast<size_t>(t)] = s;
                    dot += s * pi[t];
                }
                const double* qi = Q.data() + static_cast<int64_t>(i) * d;
                double* gqi = gq.data() + static_cast<int64_t>(i) * d;
                for (int t = 0; t < seq; ++t) {
                    const double ds = pi[t] * (dp[static_cast<size_t>(t)] - dot) * n.a;
                    const int64_t row = static_cast<int64_t>(i) * seq + t;
                    const double* kt = K.data() + row * d;
                    double* gkt = gk.data() + row * d;
                    for (int c = 0; c < d; ++c) {
                        gqi[c] += ds * kt[c];
                        gkt[c] += ds * qi[c];
                    }
                }
            }
            break;
        }
        case Op::BezierSample: {
            Tensor& go = grad_buf(n.in[0]);
            const int n_rows = n.val.rows();
            const int t_out = n.basis->t_out;
            for (int i = 0; i < n_rows; ++i) {
                for (int s = 0; s < t_out; ++s) {
                    const double* w = n.basis->weights.data() + static_cast<int64_t>(s) * 5;
                    const double gx = g.at(i, 2 * s);
                    const double gy = g.at(i, 2 * s + 1);
                    for (int kk = 1; kk <= 4; ++kk) {
                        go.at(i, 2 * (kk - 1)) += w[kk] * gx;
                        go.at(i, 2 * (kk - 1) + 1) += w[kk] * gy;
                    }
                }
            }
            break;
        }
        case Op::MaskedL2: {
            const Tensor& P = value(n.in[0]);
            const Tensor& T = value(n.in[1]);
            Tensor& gp = grad_buf(n.in[0]);
            const int n_rows = n.aux.rows(), t_out = n.aux.cols();
            const double c = g[0] * 2.0 / (static_cast<double>(n_rows) * t_out);
            for (int i = 0; i < n_rows; ++i) {
                for (int s = 0; s < t_out; ++s) {
                    const double m = n.aux.at(i, s);
                    if (m == 0.0) continue;
                    const int64_t base = (static_cast<int64_t>(i) * t_out + s) * 2;
                    gp[base] += c * m * (P[base] - T[base]);
                    gp[base + 1] += c * m * (P[base + 1] - T[base + 1]);
                }
            }
            break;
        }
    }
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    Tape tape;
    const int qi = tape.leaf(q);
    const int ki = tape.leaf(k);
    const int vi = tape.leaf(v);
    return tape.value(tape.attention(qi, ki, vi));
}

}  // namespace edgevtp
