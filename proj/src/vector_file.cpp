#include <fstream>

#include <json.hpp>

#include "grains/binary_io.hpp"
#include "grains/steering.hpp"

namespace grains {

using nlohmann::json;

// Layout: magic "GRNSVEC1", u16 version, u32 header length, JSON header,
// then per layer: u16 layer, d f64 for v+, v-, v (little-endian).

namespace {

json header_json(const SteeringVectorSet& v) {
  const Provenance& p = v.provenance;
  json prov;
  prov["dataset_hash"] = p.dataset_hash;
  prov["method"] = std::string(to_string(p.method));
  prov["k"] = p.k;
  prov["m"] = p.steps;
  prov["baseline_kind"] = std::string(to_string(p.baseline));
  prov["objective"] = std::string(to_string(p.objective));
  prov["modality_filter"] = std::string(to_string(p.filter));
  prov["seed"] = p.seed;
  prov["n_examples"] = p.n_examples;
  prov["skipped"] = p.skipped;
  json h;
  h["dim"] = v.dim;
  h["layers"] = v.layers.size();
  h["pca_mode"] = std::string(to_string(v.pca_mode));
  h["sign_convention"] = "mean-aligned";
  h["provenance"] = std::move(prov);
  return h;
}

void write_vec(std::ostream& os, const Eigen::VectorXd& v) {
  for (Index i = 0; i < v.size(); ++i) io::write_f64(os, v(i));
}

Eigen::VectorXd read_vec(std::istream& is, Index d) {
  Eigen::VectorXd v(d);
  for (Index i = 0; i < d; ++i) v(i) = io::read_f64(is, "vector data");
  return v;
}

}  // namespace

void write_vectors(std::ostream& os, const SteeringVectorSet& vectors) {
  for (const auto& lv : vectors.layers) {
    if (lv.positive.size() != vectors.dim || lv.negative.size() != vectors.dim || lv.combined.size() != vectors.dim) {
      throw DimensionError("write_vectors: layer " + std::to_string(lv.layer) + " does not have dim " +
                           std::to_string(vectors.dim));
    }
  }
  const std::string header = header_json(vectors).dump();
  io::write_bytes(os, kVectorMagic.data(), kVectorMagic.size());
  io::write_u16(os, kVectorVersion);
  io::write_u32(os, static_cast<std::uint32_t>(header.size()));
  io::write_bytes(os, header.data(), header.size());
  for (const auto& lv : vectors.layers) {
    io::write_u16(os, static_cast<std::uint16_t>(lv.layer));
    write_vec(os, lv.positive);
    write_vec(os, lv.negative);
    write_vec(os, lv.combined);
  }
}

SteeringVectorSet read_vectors(std::istream& is, const std::optional<std::string>& expected_dataset_hash) {
  io::expect_magic(is, kVectorMagic);
  const std::uint16_t version = io::read_u16(is, "version");
  if (version != kVectorVersion) {
    throw FormatError("vector file version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t len = io::read_u32(is, "header length");
  if (len > (1u << 24)) throw FormatError("vector header length " + std::to_string(len) + " is implausible");
  std::string header(len, '\0');
  io::read_bytes(is, header.data(), len, "header");

  SteeringVectorSet out;
  std::size_t n_layers = 0;
  try {
    const json h = json::parse(header);
    out.dim = h.at("dim").get<int>();
    n_layers = h.at("layers").get<std::size_t>();
    out.pca_mode = pca_mode_from_string(h.at("pca_mode").get<std::string>());
    const json& p = h.at("provenance");
    Provenance& prov = out.provenance;
    prov.dataset_hash = p.at("dataset_hash").get<std::string>();
    prov.method = attribution_method_from_string(p.at("method").get<std::string>());
    prov.k = p.at("k").get<int>();
    prov.steps = p.at("m").get<int>();
    prov.baseline = baseline_kind_from_string(p.at("baseline_kind").get<std::string>());
    prov.objective = objective_kind_from_string(p.at("objective").get<std::string>());
    prov.filter = modality_filter_from_string(p.at("modality_filter").get<std::string>());
    prov.seed = p.at("seed").get<std::uint64_t>();
    prov.n_examples = p.at("n_examples").get<int>();
    prov.skipped = p.at("skipped").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("vector header: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("vector header: ") + e.what());
  }
  if (out.dim < 1) throw FormatError("vector header: dim must be positive");
  if (expected_dataset_hash && *expected_dataset_hash != out.provenance.dataset_hash) {
    throw FormatError("vector file was built from dataset " + out.provenance.dataset_hash + ", expected " +
                      *expected_dataset_hash);
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    LayerVectors lv;
    lv.layer = io::read_u16(is, "layer index");
    lv.positive = read_vec(is, out.dim);
    lv.negative = read_vec(is, out.dim);
    lv.combined = read_vec(is, out.dim);
    out.layers.push_back(std::move(lv));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("vector file has trailing bytes after " + std::to_string(n_layers) + " layer records");
  }
  return out;
}

void save_vectors(const SteeringVectorSet& vectors, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_vectors(os, vectors);
}

SteeringVectorSet load_vectors(const std::filesystem::path& path, const std::optional<std::string>& expected_dataset_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_vectors(is, expected_dataset_hash);
}

}  // namespace grains
