#include "hcache/matrix.hpp"

#include <cmath>
#include <cstring>

namespace hcache {

Matrix matmul_wt(const Matrix& x, const Matrix& w) {
  if (x.cols != w.cols) throw std::invalid_argument("matmul_wt: inner dims differ");
  Matrix y(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float* xi = x.row(i);
    for (std::size_t o = 0; o < w.rows; ++o) {
      const float* wo = w.row(o);
      float acc = 0.0f;
      for (std::size_t k = 0; k < x.cols; ++k) acc += xi[k] * wo[k];
      y.at(i, o) = acc;
    }
  }
  return y;
}

Matrix row_slice(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.rows) throw std::invalid_argument("row_slice: bad range");
  Matrix out(end - begin, m.cols);
  std::memcpy(out.v.data(), m.v.data() + begin * m.cols,
              (end - begin) * m.cols * sizeof(float));
  return out;
}

void append_rows(Matrix& dst, const Matrix& src) {
  if (dst.rows == 0 && dst.cols == 0) dst.cols = src.cols;
  if (dst.cols != src.cols) throw std::invalid_argument("append_rows: cols differ");
  dst.v.insert(dst.v.end(), src.v.begin(), src.v.end());
  dst.rows += src.rows;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::fabs(double(a.v[i]) - double(b.v[i])));
  return m;
}

}  // namespace hcache
