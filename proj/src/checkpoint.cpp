#include "spiketim/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "spiketim/errors.hpp"
#include "spiketim/tensor_io.hpp"

namespace spiketim {

namespace {

template <typename Real>
NamedTensors<Real> sorted_by_name(NamedTensors<Real> tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return tensors;
}

template <typename Real>
void write_named(std::ostream& out, const NamedTensors<Real>& tensors) {
  binary_io::write_u64(out, tensors.size());
  for (const auto& t : tensors) {
    binary_io::write_string(out, t.name);
    write_tensor(out, *t.tensor);
  }
}

template <typename Real>
void read_named(std::istream& in, const NamedTensors<Real>& targets, const char* section) {
  const std::uint64_t count = binary_io::read_u64(in, section);
  if (count != targets.size()) {
    throw LoadError(std::string(section) + ": file holds " + std::to_string(count) +
                    " tensors, model has " + std::to_string(targets.size()));
  }
  for (const auto& target : targets) {
    const std::string name = binary_io::read_string(in, section);
    if (name != target.name) {
      throw LoadError(std::string(section) + ": expected '" + target.name + "', found '" + name +
                      "'");
    }
    Tensor<Real> value = read_tensor<Real>(in);
    if (value.shape() != target.tensor->shape()) {
      throw LoadError(name + ": stored shape " + shape_to_string(value.shape()) +
                      " differs from model shape " + shape_to_string(target.tensor->shape()));
    }
    auto dst = target.tensor->mutable_data();
    std::copy(value.data().begin(), value.data().end(), dst.begin());
  }
}

void read_header(std::istream& in, CheckpointInfo& info) {
  char magic[4];
  if (!in.read(magic, 4)) throw LoadError("truncated file while reading magic");
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw LoadError("bad magic (not a STIM checkpoint)");
  const std::uint16_t version = binary_io::read_u16(in, "version");
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t length = binary_io::read_u64(in, "config length");
  if (length > (1ull << 26)) throw LoadError("implausible config length");
  std::string text(length, '\0');
  if (length && !in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw LoadError("truncated file while reading config");
  }
  try {
    info.config = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("config blob is not valid JSON: ") + e.what());
  }
}

}  // namespace

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info,
                     SpikingTransformer<Real>& model, AdamW<Real>* optimizer) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, 4);
  binary_io::write_u16(out, kCheckpointVersion);
  nlohmann::json config = info.config;
  config["model"] = to_json(model.config());
  const std::string text = config.dump();
  binary_io::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto params = model.parameters();
  write_named(out, sorted_by_name(params));
  write_named(out, sorted_by_name(model.buffers()));

  const bool has_optimizer = optimizer && !optimizer->first_moments().empty();
  binary_io::write_u8(out, has_optimizer ? 1 : 0);
  if (has_optimizer) {
    binary_io::write_u64(out, optimizer->step_count());
    // Moments follow the optimizer's own order, which is the model's
    // declaration order; sort them alongside the parameter names.
    std::vector<std::size_t> order(params.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return params[a].name < params[b].name; });
    for (std::size_t i : order) {
      write_tensor(out, optimizer->first_moments()[i]);
      write_tensor(out, optimizer->second_moments()[i]);
    }
  }
  binary_io::write_u32(out, info.epoch);
  binary_io::write_string(out, info.rng_state);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  CheckpointInfo info;
  read_header(in, info);
  return info;
}

template <typename Real>
CheckpointInfo load_checkpoint(const std::filesystem::path& path, SpikingTransformer<Real>& model,
                               AdamW<Real>* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  CheckpointInfo info;
  read_header(in, info);
  if (!info.config.contains("model")) throw LoadError("checkpoint config lacks a model section");
  const nlohmann::json expected = to_json(model.config());
  if (info.config.at("model") != expected) {
    throw LoadError("model config mismatch: checkpoint has " + info.config.at("model").dump() +
                    ", model has " + expected.dump());
  }
  const auto params = model.parameters();
  read_named(in, sorted_by_name(params), "parameters");
  read_named(in, sorted_by_name(model.buffers()), "buffers");

  const std::uint8_t has_optimizer = binary_io::read_u8(in, "optimizer flag");
  if (has_optimizer > 1) throw LoadError("corrupt optimizer flag");
  if (has_optimizer) {
    const std::uint64_t step = binary_io::read_u64(in, "optimizer step");
    std::vector<std::size_t> order(params.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return params[a].name < params[b].name; });
    std::vector<Tensor<Real>> first(params.size()), second(params.size());
    for (std::size_t i : order) {
      first[i] = read_tensor<Real>(in);
      second[i] = read_tensor<Real>(in);
      if (first[i].shape() != params[i].tensor->shape() ||
          second[i].shape() != params[i].tensor->shape()) {
        throw LoadError("optimizer moment shape mismatch for " + params[i].name);
      }
    }
    if (optimizer) optimizer->restore(step, std::move(first), std::move(second));
  }
  info.epoch = binary_io::read_u32(in, "epoch");
  info.rng_state = binary_io::read_string(in, "rng state");
  if (in.peek() != std::char_traits<char>::eof()) throw LoadError("trailing bytes after checkpoint");
  return info;
}

template void save_checkpoint(const std::filesystem::path&, const CheckpointInfo&,
                              SpikingTransformer<float>&, AdamW<float>*);
template void save_checkpoint(const std::filesystem::path&, const CheckpointInfo&,
                              SpikingTransformer<double>&, AdamW<double>*);
template CheckpointInfo load_checkpoint(const std::filesystem::path&, SpikingTransformer<float>&,
                                        AdamW<float>*);
template CheckpointInfo load_checkpoint(const std::filesystem::path&, SpikingTransformer<double>&,
                                        AdamW<double>*);

}  // namespace spiketim
