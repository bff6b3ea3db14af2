#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "spiketim/tensor.hpp"

namespace spiketim {

// Little-endian layout: u32 rank, u64 extents[rank], u8 precision tag (4 for
// 32-bit, 8 for 64-bit), then the raw values.
template <typename Real>
void write_tensor(std::ostream& out, const Tensor<Real>& tensor);

// Throws LoadError on truncation, a precision tag other than sizeof(Real), or
// implausible extents.
template <typename Real>
Tensor<Real> read_tensor(std::istream& in);

namespace binary_io {

void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_string(std::ostream& out, const std::string& s);  // u32 length + bytes

// Each reader throws LoadError naming `what` when the stream runs dry.
std::uint8_t read_u8(std::istream& in, const char* what);
std::uint16_t read_u16(std::istream& in, const char* what);
std::uint32_t read_u32(std::istream& in, const char* what);
std::uint64_t read_u64(std::istream& in, const char* what);
std::string read_string(std::istream& in, const char* what);

}  // namespace binary_io

}  // namespace spiketim
