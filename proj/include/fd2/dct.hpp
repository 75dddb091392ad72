#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fd2/tensor.hpp"

namespace fd2 {

struct FrequencyIndex {
  std::size_t u = 0;
  std::size_t v = 0;

  friend constexpr bool operator==(const FrequencyIndex&, const FrequencyIndex&) = default;
  friend constexpr auto operator<=>(const FrequencyIndex&, const FrequencyIndex&) = default;
};

enum class FrequencyPolicy { zigzag_skip_dc, custom };

/// Ordered (u,v) indices, one per channel group.
struct FrequencySet {
  std::vector<FrequencyIndex> indices;
  FrequencyPolicy policy = FrequencyPolicy::zigzag_skip_dc;

  std::size_t size() const { return indices.size(); }
};

/// One 2-D DCT basis plane B^{u,v} of extent H x W, stored as (1,1,H,W).
///
/// The unnormalized form drops the constant factors:
///   B^{u,v}_{i,j} = cos(pi*u/H*(i+1/2)) * cos(pi*v/W*(j+1/2)).
/// The normalized form multiplies by sqrt(a_u/H)*sqrt(a_v/W), a_0 = 1, a_k = 2,
/// which makes the basis orthonormal.
template <Scalar T>
struct DctBasis {
  std::size_t u = 0;
  std::size_t v = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor<T> values;
};

namespace detail {

inline double dct_cos(std::size_t k, std::size_t i, std::size_t extent) {
  return std::cos(std::numbers::pi * static_cast<double>(k) / static_cast<double>(extent) *
                  (static_cast<double>(i) + 0.5));
}

inline double dct_norm(std::size_t k, std::size_t extent) {
  return std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(extent));
}

/// cos table: row k holds cos(pi*k/extent*(i+1/2)) for i in [0, extent).
inline std::vector<double> cos_table(std::size_t extent) {
  std::vector<double> table(extent * extent);
  for (std::size_t k = 0; k < extent; ++k) {
    for (std::size_t i = 0; i < extent; ++i) table[k * extent + i] = dct_cos(k, i, extent);
  }
  return table;
}

}  // namespace detail

template <Scalar T>
DctBasis<T> dct_basis(std::size_t u, std::size_t v, std::size_t height, std::size_t width,
                      bool normalized = false) {
  if (height == 0 || width == 0) throw ValueError("dct_basis: empty grid");
  if (u >= height || v >= width) {
    throw ValueError("dct_basis: index (" + std::to_string(u) + "," + std::to_string(v) + ") outside " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const double scale = normalized ? detail::dct_norm(u, height) * detail::dct_norm(v, width) : 1.0;
  DctBasis<T> basis{u, v, height, width, Tensor<T>(Shape{1, 1, height, width})};
  for (std::size_t i = 0; i < height; ++i) {
    const double ci = detail::dct_cos(u, i, height);
    for (std::size_t j = 0; j < width; ++j) {
      basis.values(0, 0, i, j) = static_cast<T>(scale * ci * detail::dct_cos(v, j, width));
    }
  }
  return basis;
}

/// Unnormalized 2-D DCT of every (n,c) plane: f^{u,v} = sum_ij x_ij B^{u,v}_ij.
template <Scalar T>
Tensor<T> dct2d(const Tensor<T>& x) {
  require_finite(x, "dct2d");
  const Shape& s = x.shape();
  const auto ch = detail::cos_table(s.h);
  const auto cw = detail::cos_table(s.w);
  Tensor<T> f(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = f.plane(n, c);
      for (std::size_t u = 0; u < s.h; ++u) {
        for (std::size_t v = 0; v < s.w; ++v) {
          double acc = 0;
          for (std::size_t i = 0; i < s.h; ++i) {
            const double cu = ch[u * s.h + i];
            for (std::size_t j = 0; j < s.w; ++j) acc += in[i * s.w + j] * (cu * cw[v * s.w + j]);
          }
          out[u * s.w + v] = static_cast<T>(acc);
        }
      }
    }
  }
  return f;
}

/// Inverse of dct2d: x_ij = sum_uv f^{u,v} B^{u,v}_ij / <B^{u,v}, B^{u,v}>, where
/// the squared norm is H*W (u=v=0), H*W/2 (one zero index) or H*W/4.
template <Scalar T>
Tensor<T> inverse_dct2d(const Tensor<T>& f) {
  const Shape& s = f.shape();
  const auto ch = detail::cos_table(s.h);
  const auto cw = detail::cos_table(s.w);
  const double hw = static_cast<double>(s.h * s.w);
  Tensor<T> x(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = f.plane(n, c);
      T* out = x.plane(n, c);
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
          double acc = 0;
          for (std::size_t u = 0; u < s.h; ++u) {
            for (std::size_t v = 0; v < s.w; ++v) {
              const double energy = hw / ((u == 0 ? 1.0 : 2.0) * (v == 0 ? 1.0 : 2.0));
              acc += in[u * s.w + v] * ch[u * s.h + i] * cw[v * s.w + j] / energy;
            }
          }
          out[i * s.w + j] = static_cast<T>(acc);
        }
      }
    }
  }
  return x;
}

/// Anti-diagonal zigzag over an H x W grid, starting at (0,0). Odd diagonals
/// run with increasing row, even diagonals with decreasing row.
inline std::vector<FrequencyIndex> zigzag_order(std::size_t height, std::size_t width) {
  std::vector<FrequencyIndex> order;
  order.reserve(height * width);
  for (std::size_t d = 0; d + 1 < height + width; ++d) {
    const std::size_t row_lo = d >= width ? d - width + 1 : 0;
    const std::size_t row_hi = std::min(d, height - 1);
    if (d % 2 == 1) {
      for (std::size_t r = row_lo; r <= row_hi; ++r) order.push_back({r, d - r});
    } else {
      for (std::size_t r = row_hi + 1; r-- > row_lo;) order.push_back({r, d - r});
    }
  }
  return order;
}

inline FrequencySet select_frequencies(std::size_t n, std::size_t height, std::size_t width,
                                       FrequencyPolicy policy,
                                       const std::vector<FrequencyIndex>& custom = {}) {
  if (height == 0 || width == 0) throw ValueError("select_frequencies: empty grid");
  FrequencySet set{{}, policy};
  if (policy == FrequencyPolicy::zigzag_skip_dc) {
    if (n < 1 || n > height * width - 1) {
      throw ValueError("select_frequencies: n = " + std::to_string(n) + " outside [1, " +
                       std::to_string(height * width - 1) + "]");
    }
    const auto order = zigzag_order(height, width);
    set.indices.assign(order.begin() + 1, order.begin() + 1 + static_cast<std::ptrdiff_t>(n));
    return set;
  }
  if (custom.size() != n) {
    throw ValueError("select_frequencies: custom list has " + std::to_string(custom.size()) +
                     " entries, expected " + std::to_string(n));
  }
  std::set<FrequencyIndex> seen;
  for (const auto& idx : custom) {
    if (idx.u >= height || idx.v >= width) {
      throw ValueError("select_frequencies: (" + std::to_string(idx.u) + "," + std::to_string(idx.v) +
                       ") outside " + std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    if (!seen.insert(idx).second) {
      throw ValueError("select_frequencies: duplicate index (" + std::to_string(idx.u) + "," +
                       std::to_string(idx.v) + ")");
    }
  }
  set.indices = custom;
  return set;
}

}  // namespace fd2
