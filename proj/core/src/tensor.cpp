#include "qarvd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "qarvd/bytes.hpp"

namespace qarvd {

namespace {

size_t product(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimension must be positive");
    n *= d;
  }
  return n;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  std::ostringstream ss;
  ss << op << ": shape mismatch [";
  for (size_t d : a.shape()) ss << d << " ";
  ss << "] vs [";
  for (size_t d : b.shape()) ss << d << " ";
  ss << "]";
  throw std::invalid_argument(ss.str());
}

}  // namespace

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), 0.0) {
  cols_cached_ = shape_.empty() ? 0 : shape_.back();
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size())
    throw std::invalid_argument("tensor data length does not match shape");
  cols_cached_ = shape_.empty() ? 0 : shape_.back();
}

Tensor Tensor::identity(size_t n) {
  Tensor t({n, n});
  for (size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

size_t Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("rows(): tensor is not 2-D");
  return shape_[0];
}

size_t Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("cols(): tensor is not 2-D");
  return shape_[1];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void IntTensor::range_check() const {
  const int32_t hi = (1 << (bits - 1)) - 1;
  const int32_t lo = -hi - 1;  // asymmetric storage bound; symmetric data stays in [-hi, hi]
  for (int32_t v : data)
    if (v < lo || v > hi)
      throw std::out_of_range("int tensor element outside declared bit range");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: inputs must be 2-D");
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  // i-k-j order: each c(i,j) accumulates over k ascending, identical to the
  // naive triple loop element-wise, but cache-friendly and vectorizable.
  for (size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    const double* arow = a.data() + i * k;
    for (size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b.data() + kk * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul_nt: inputs must be 2-D");
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  return matmul(a, transpose(b));
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: input must be 2-D");
  const size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

double frobenius_sq_distance(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_error("frobenius_sq_distance", a, b);
  double acc = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = pa[i] - pb[i];
    acc += d * d;
  }
  return acc;
}

double frobenius_distance(const Tensor& a, const Tensor& b) {
  return std::sqrt(frobenius_sq_distance(a, b));
}

Tensor channel_l2_norms(const Tensor& w, size_t channel_axis) {
  if (w.rank() != 2) throw std::invalid_argument("channel_l2_norms: input must be 2-D");
  if (channel_axis > 1) throw std::invalid_argument("channel_l2_norms: axis out of range");
  const size_t m = w.rows(), n = w.cols();
  if (channel_axis == 1) {
    Tensor out({n});
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) out[j] += w.at(i, j) * w.at(i, j);
    for (size_t j = 0; j < n; ++j) out[j] = std::sqrt(out[j]);
    return out;
  }
  Tensor out({m});
  for (size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (size_t j = 0; j < n; ++j) acc += w.at(i, j) * w.at(i, j);
    out[i] = std::sqrt(acc);
  }
  return out;
}

// ---- serialization ----

namespace {
constexpr char kMagic[4] = {'Q', 'T', 'N', 'S'};
constexpr uint16_t kVersion = 1;

void write_header(std::ostream& os, TensorDType dtype, int bits,
                  const std::vector<size_t>& shape) {
  write_bytes(os, kMagic, 4);
  write_le<uint16_t>(os, kVersion);
  write_le<uint8_t>(os, static_cast<uint8_t>(dtype));
  if (dtype == TensorDType::int_packed) write_le<uint8_t>(os, static_cast<uint8_t>(bits));
  write_le<uint8_t>(os, static_cast<uint8_t>(shape.size()));
  for (size_t d : shape) write_le<uint64_t>(os, static_cast<uint64_t>(d));
}

struct Header {
  TensorDType dtype;
  int bits;
  std::vector<size_t> shape;
  size_t count;
};

Header read_header(std::istream& is) {
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("tensor container: bad magic");
  const uint16_t version = read_le<uint16_t>(is);
  if (version != kVersion) throw std::runtime_error("tensor container: unsupported version");
  Header h{};
  h.dtype = static_cast<TensorDType>(read_le<uint8_t>(is));
  h.bits = 0;
  if (h.dtype == TensorDType::int_packed) h.bits = read_le<uint8_t>(is);
  const uint8_t rank = read_le<uint8_t>(is);
  h.shape.resize(rank);
  h.count = 1;
  for (auto& d : h.shape) {
    d = static_cast<size_t>(read_le<uint64_t>(is));
    h.count *= d;
  }
  return h;
}
}  // namespace

void save_tensor(std::ostream& os, const Tensor& t, TensorDType dtype) {
  if (dtype == TensorDType::int_packed)
    throw std::invalid_argument("save_tensor: use save_int_tensor for integer data");
  write_header(os, dtype, 0, t.shape());
  if (dtype == TensorDType::f64) {
    write_bytes(os, t.data(), t.size() * sizeof(double));
  } else {
    for (size_t i = 0; i < t.size(); ++i) write_le<float>(os, static_cast<float>(t[i]));
  }
}

Tensor load_tensor(std::istream& is) {
  const Header h = read_header(is);
  if (h.dtype == TensorDType::int_packed)
    throw std::runtime_error("load_tensor: container holds integer data");
  Tensor t(h.shape);
  if (h.dtype == TensorDType::f64) {
    read_bytes(is, t.data(), h.count * sizeof(double));
  } else {
    for (size_t i = 0; i < h.count; ++i) t[i] = static_cast<double>(read_le<float>(is));
  }
  return t;
}

size_t packed_int_data_bytes(size_t count, int bits) {
  if (bits == 4) return (count + 1) / 2;  // two per byte, low nibble first
  return count;                           // 6- and 8-bit: one byte each
}

void save_int_tensor(std::ostream& os, const IntTensor& t) {
  if (t.bits != 4 && t.bits != 6 && t.bits != 8)
    throw std::invalid_argument("save_int_tensor: packed storage requires bits in {4,6,8}");
  write_header(os, TensorDType::int_packed, t.bits, t.shape);
  if (t.bits == 4) {
    for (size_t i = 0; i < t.data.size(); i += 2) {
      const uint8_t lo = static_cast<uint8_t>(t.data[i]) & 0x0f;
      const uint8_t hi =
          (i + 1 < t.data.size()) ? (static_cast<uint8_t>(t.data[i + 1]) & 0x0f) : 0;
      write_le<uint8_t>(os, static_cast<uint8_t>(lo | (hi << 4)));
    }
  } else {
    for (int32_t v : t.data) write_le<int8_t>(os, static_cast<int8_t>(v));
  }
}

IntTensor load_int_tensor(std::istream& is) {
  const Header h = read_header(is);
  if (h.dtype != TensorDType::int_packed)
    throw std::runtime_error("load_int_tensor: container holds float data");
  IntTensor t;
  t.shape = h.shape;
  t.bits = h.bits;
  t.data.resize(h.count);
  if (h.bits == 4) {
    const size_t nbytes = packed_int_data_bytes(h.count, 4);
    for (size_t b = 0; b < nbytes; ++b) {
      const uint8_t byte = read_le<uint8_t>(is);
      auto nibble = [](uint8_t v) {
        return static_cast<int32_t>(static_cast<int8_t>(static_cast<uint8_t>(v << 4)) >> 4);
      };
      t.data[2 * b] = nibble(byte & 0x0f);
      if (2 * b + 1 < h.count) t.data[2 * b + 1] = nibble((byte >> 4) & 0x0f);
    }
  } else {
    for (auto& v : t.data) v = static_cast<int32_t>(read_le<int8_t>(is));
  }
  return t;
}

void save_tensor_file(const std::string& path, const Tensor& t, TensorDType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  save_tensor(os, t, dtype);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  return load_tensor(is);
}

}  // namespace qarvd
