#include <fstream>
#include <sstream>

#include "grains/binary_io.hpp"
#include "grains/model.hpp"

namespace grains {

// Layout: magic, u16 version, config block, u32 record count, then per
// parameter: u32 name length, name bytes, u32 rows, u32 cols, f64 data
// (row-major). All integers and floats little-endian.

void write_checkpoint(std::ostream& os, const TransformerLM& model) {
  const ModelConfig& c = model.config();
  io::write_bytes(os, kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_u16(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(c.vocab_size));
  io::write_u32(os, static_cast<std::uint32_t>(c.dim));
  io::write_u32(os, static_cast<std::uint32_t>(c.layers));
  io::write_u32(os, static_cast<std::uint32_t>(c.heads));
  io::write_f64(os, c.ff_mult);
  io::write_u32(os, static_cast<std::uint32_t>(c.max_seq));
  io::write_u64(os, c.seed);
  io::write_u32(os, static_cast<std::uint32_t>(model.num_params()));
  for (std::size_t i = 0; i < model.num_params(); ++i) {
    const std::string& name = model.param_name(i);
    const Matrix& m = model.param(i);
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    io::write_bytes(os, name.data(), name.size());
    io::write_u32(os, static_cast<std::uint32_t>(m.rows()));
    io::write_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Index k = 0; k < m.size(); ++k) io::write_f64(os, m.data()[k]);
  }
}

TransformerLM read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const std::uint16_t version = io::read_u16(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig c;
  c.vocab_size = static_cast<int>(io::read_u32(is, "config"));
  c.dim = static_cast<int>(io::read_u32(is, "config"));
  c.layers = static_cast<int>(io::read_u32(is, "config"));
  c.heads = static_cast<int>(io::read_u32(is, "config"));
  c.ff_mult = io::read_f64(is, "config");
  c.max_seq = static_cast<int>(io::read_u32(is, "config"));
  c.seed = io::read_u64(is, "config");
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  TransformerLM model = TransformerLM::zeros(c);
  const std::uint32_t count = io::read_u32(is, "record count");
  if (count != model.num_params()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " parameter records, expected " +
                      std::to_string(model.num_params()));
  }
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t len = io::read_u32(is, "parameter name length");
    if (len > 4096) throw FormatError("parameter name length " + std::to_string(len) + " is implausible");
    std::string name(len, '\0');
    io::read_bytes(is, name.data(), len, "parameter name");
    if (name != model.param_name(r)) {
      throw FormatError("record " + std::to_string(r) + " is \"" + name + "\", expected \"" +
                        model.param_name(r) + "\"");
    }
    const Index rows = io::read_u32(is, "parameter shape");
    const Index cols = io::read_u32(is, "parameter shape");
    Matrix& m = model.param(r);
    if (rows != m.rows() || cols != m.cols()) {
      throw FormatError("parameter \"" + name + "\" has shape " + shape_string(rows, cols) + ", expected " +
                        shape_string(m));
    }
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = io::read_f64(is, name);
  }
  return model;
}

void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, model);
}

TransformerLM load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace grains
