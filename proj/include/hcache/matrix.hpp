#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace hcache {

// Dense row-major float matrix. All model state (weights, activations,
// KV entries) uses this one representation.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> v;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0f) {}

  float& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  float* row(std::size_t r) { return v.data() + r * cols; }
  const float* row(std::size_t r) const { return v.data() + r * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix& o) const {
    return rows == o.rows && cols == o.cols && v == o.v;
  }
};

// Y = X * W^T, where W is (out x in) and X is (n x in). Both operands are
// walked row-wise so the inner product runs over contiguous memory.
Matrix matmul_wt(const Matrix& x, const Matrix& w);

// Row-slice copy [begin, end).
Matrix row_slice(const Matrix& m, std::size_t begin, std::size_t end);

// Appends all rows of src to dst (cols must match; dst may be empty).
void append_rows(Matrix& dst, const Matrix& src);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace hcache
