#ifndef QARVD_TENSOR_HPP
#define QARVD_TENSOR_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace qarvd {

// Dense row-major f64 array. All arithmetic contracts in this project are
// stated at 64-bit; f32 exists only as a storage mode in the file format.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape);
  Tensor(std::vector<size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor identity(size_t n);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // matrix accessors (rank must be 2)
  size_t rows() const;
  size_t cols() const;
  double& at(size_t r, size_t c) { return data_[r * cols_cached_ + c]; }
  double at(size_t r, size_t c) const { return data_[r * cols_cached_ + c]; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool all_finite() const;

 private:
  std::vector<size_t> shape_;
  std::vector<double> data_;
  size_t cols_cached_ = 0;  // shape_.back() for rank>=1, for at()
};

// Signed integer codes with a declared bit width b in {4, 6, 8} (wider
// widths are tolerated in memory for free-form schemes; only b<=8 has a
// packed storage form). Codes are held unpacked as int32 for arithmetic.
struct IntTensor {
  std::vector<size_t> shape;
  std::vector<int32_t> data;
  int bits = 8;

  size_t size() const { return data.size(); }
  size_t rows() const { return shape.at(0); }
  size_t cols() const { return shape.at(1); }
  int32_t at(size_t r, size_t c) const { return data[r * shape[1] + c]; }
  void range_check() const;  // every element within the declared symmetric range
};

// C = A * B with 64-bit accumulation, summation over k strictly ascending
// for every output element (exactly reproducible, thread-count independent).
Tensor matmul(const Tensor& a, const Tensor& b);

// C = A * B^T where B is stored row-major [n x k]. Same summation order
// guarantee as matmul. This is the layer-forward primitive: activations
// [m x d_in] times a weight stored [d_out x d_in].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

double frobenius_sq_distance(const Tensor& a, const Tensor& b);
double frobenius_distance(const Tensor& a, const Tensor& b);

// L2 norm of each slice along channel_axis. For a weight stored
// [d_out x d_in] the input channels are the columns: channel_axis = 1.
// The axis is always explicit to avoid silent transposition bugs.
Tensor channel_l2_norms(const Tensor& w, size_t channel_axis);

// ---- binary tensor container ----
// magic "QTNS", version u16, dtype u8 (0=f64, 1=f32, 2=int-packed followed
// by a bit-width byte), rank u8, dims u64 LE, raw data LE.
enum class TensorDType : uint8_t { f64 = 0, f32 = 1, int_packed = 2 };

void save_tensor(std::ostream& os, const Tensor& t, TensorDType dtype = TensorDType::f64);
Tensor load_tensor(std::istream& is);

void save_int_tensor(std::ostream& os, const IntTensor& t);
IntTensor load_int_tensor(std::istream& is);

// byte size of the serialized payload (dims + data, no magic/version)
size_t packed_int_data_bytes(size_t count, int bits);

void save_tensor_file(const std::string& path, const Tensor& t,
                      TensorDType dtype = TensorDType::f64);
Tensor load_tensor_file(const std::string& path);

}  // namespace qarvd

#endif  // QARVD_TENSOR_HPP
