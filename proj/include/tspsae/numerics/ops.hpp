#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and
// registers a backward function on the tape of its inputs.

#include <cstdint>
#include <span>
#include <vector>

#include "tspsae/numerics/tape.hpp"

namespace tspsae::ad {

// Row mask: one byte per element, nonzero = excluded.
using Mask = std::vector<std::uint8_t>;

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);  // [m,k] x [k,n]
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);  // [m,k] x [n,k]^T

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& a, double s);
// a[m,n] + v[n] on every row.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& v);

template <class T>
Var<T> relu(const Var<T>& a);
template <class T>
Var<T> tanh(const Var<T>& a);

// Softmax of x / temperature along `axis` (rank 1: axis 0; rank 2: 0 or 1).
template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis, double temperature = 1.0);

// Row-wise log-softmax of x / temperature. Masked entries come out as -inf
// and receive no gradient. Every row needs at least one unmasked entry.
template <class T>
Var<T> log_softmax(const Var<T>& x, const Mask* mask = nullptr, double temperature = 1.0);

// Row-wise (x - mean) / sqrt(var + eps) * gain + bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5);

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b);

// out[i] = a[index[i]]
template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> index);

// Repeats a vector (or 1 x n matrix) as `rows` rows.
template <class T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t rows);

// Mean over consecutive blocks of rows: [groups*r, n] -> [groups, n].
template <class T>
Var<T> group_mean(const Var<T>& a, std::size_t groups);

// out[g, j] = q[g] . keys[g*r + j] for keys of shape [groups*r, d].
template <class T>
Var<T> group_rowdot(const Var<T>& q, const Var<T>& keys);

// Multi-head scaled dot-product attention over independent groups.
// q: [groups*nq, d], k and v: [groups*nk, d]; heads split d evenly.
// mask (optional): [groups*nk] bytes, nonzero = key hidden from every query
// of that group. Output: [groups*nq, d].
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, std::size_t groups,
                 const Mask* key_mask = nullptr);

// out[i] = a[i, index[i]]
template <class T>
Var<T> pick(const Var<T>& a, std::span<const std::size_t> index);

template <class T>
Var<T> sum(const Var<T>& a);
template <class T>
Var<T> mean(const Var<T>& a);
template <class T>
Var<T> sum_squares(const Var<T>& a);
// sum_i |a_i|
template <class T>
Var<T> l1(const Var<T>& a);
// sum_i w_i * a_i with constant weights.
template <class T>
Var<T> weighted_sum(const Var<T>& a, std::span<const double> weights);

}  // namespace tspsae::ad
