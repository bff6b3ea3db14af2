#include "spiketim/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <vector>

#include "spiketim/errors.hpp"

namespace spiketim {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian stores");

namespace binary_io {

namespace {

template <typename T>
void write_raw(std::ostream& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const char* what) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) {
    throw LoadError(std::string("truncated file while reading ") + what);
  }
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { write_raw(out, v); }
void write_u16(std::ostream& out, std::uint16_t v) { write_raw(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_raw(out, v); }

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint8_t read_u8(std::istream& in, const char* what) { return read_raw<std::uint8_t>(in, what); }
std::uint16_t read_u16(std::istream& in, const char* what) {
  return read_raw<std::uint16_t>(in, what);
}
std::uint32_t read_u32(std::istream& in, const char* what) {
  return read_raw<std::uint32_t>(in, what);
}
std::uint64_t read_u64(std::istream& in, const char* what) {
  return read_raw<std::uint64_t>(in, what);
}

std::string read_string(std::istream& in, const char* what) {
  const std::uint32_t length = read_u32(in, what);
  if (length > (1u << 26)) throw LoadError(std::string("implausible length for ") + what);
  std::string s(length, '\0');
  if (length && !in.read(s.data(), length)) {
    throw LoadError(std::string("truncated file while reading ") + what);
  }
  return s;
}

}  // namespace binary_io

template <typename Real>
void write_tensor(std::ostream& out, const Tensor<Real>& tensor) {
  binary_io::write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (auto extent : tensor.shape()) binary_io::write_u64(out, extent);
  binary_io::write_u8(out, static_cast<std::uint8_t>(sizeof(Real)));
  const auto data = tensor.data();
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(Real)));
}

template <typename Real>
Tensor<Real> read_tensor(std::istream& in) {
  const std::uint32_t rank = binary_io::read_u32(in, "tensor rank");
  if (rank > 8) throw LoadError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& extent : shape) {
    extent = binary_io::read_u64(in, "tensor extent");
    if (extent > (1ull << 32)) throw LoadError("implausible tensor extent");
    count *= extent;
    if (count > (1ull << 32)) throw LoadError("implausible tensor size");
  }
  const std::uint8_t tag = binary_io::read_u8(in, "tensor precision tag");
  if (tag != sizeof(Real)) {
    throw LoadError("tensor precision tag " + std::to_string(tag) + " does not match the " +
                    std::to_string(8 * sizeof(Real)) + "-bit model");
  }
  std::vector<Real> data(count);
  if (count && !in.read(reinterpret_cast<char*>(data.data()),
                        static_cast<std::streamsize>(count * sizeof(Real)))) {
    throw LoadError("truncated file while reading tensor values");
  }
  return Tensor<Real>(std::move(shape), std::move(data));
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace spiketim
