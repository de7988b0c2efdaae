#include "grains/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "grains/binary_io.hpp"

namespace grains {

using nlohmann::json;

namespace {

std::vector<int> ids_from(const json& j, const char* field) {
  if (!j.is_array()) throw std::invalid_argument(std::string(field) + " must be an array of integers");
  std::vector<int> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw std::invalid_argument(std::string(field) + " must contain integers");
    out.push_back(v.get<int>());
  }
  return out;
}

json to_json(const PreferenceExample& ex) {
  json j;
  j["id"] = ex.id;
  j["prompt_ids"] = ex.prompt.ids;
  json mod = json::array();
  for (Modality m : ex.prompt.modality) mod.push_back(std::string(to_string(m)));
  j["prompt_modality"] = std::move(mod);
  j["y_pos_ids"] = ex.y_pos.ids;
  j["y_neg_ids"] = ex.y_neg.ids;
  if (!ex.options.empty()) {
    json opts = json::array();
    for (const auto& o : ex.options) opts.push_back(o.ids);
    j["options"] = std::move(opts);
  }
  if (ex.gold) j["gold"] = *ex.gold;
  return j;
}

PreferenceExample from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("record must be a JSON object");
  for (const char* field : {"id", "prompt_ids", "y_pos_ids", "y_neg_ids"}) {
    if (!j.contains(field)) throw std::invalid_argument(std::string("missing field \"") + field + "\"");
  }
  PreferenceExample ex;
  const json& id = j.at("id");
  if (id.is_string()) {
    ex.id = id.get<std::string>();
  } else if (id.is_number_integer()) {
    ex.id = std::to_string(id.get<long long>());
  } else {
    throw std::invalid_argument("id must be a string or integer");
  }
  ex.prompt.ids = ids_from(j.at("prompt_ids"), "prompt_ids");
  if (j.contains("prompt_modality")) {
    const json& mod = j.at("prompt_modality");
    if (!mod.is_array()) throw std::invalid_argument("prompt_modality must be an array");
    for (const auto& m : mod) {
      if (m.is_string()) {
        ex.prompt.modality.push_back(modality_from_string(m.get<std::string>()));
      } else if (m.is_number_integer() && (m.get<int>() == 0 || m.get<int>() == 1)) {
        ex.prompt.modality.push_back(m.get<int>() == 1 ? Modality::visual : Modality::text);
      } else {
        throw std::invalid_argument("prompt_modality entries must be \"text\" or \"visual\"");
      }
    }
  } else {
    ex.prompt.modality.assign(ex.prompt.ids.size(), Modality::text);
  }
  if (ex.prompt.modality.size() != ex.prompt.ids.size()) {
    throw std::invalid_argument("prompt_modality length does not match prompt_ids");
  }
  ex.y_pos = TokenSeq::text(ids_from(j.at("y_pos_ids"), "y_pos_ids"));
  ex.y_neg = TokenSeq::text(ids_from(j.at("y_neg_ids"), "y_neg_ids"));
  if (j.contains("options")) {
    const json& opts = j.at("options");
    if (!opts.is_array()) throw std::invalid_argument("options must be an array of id arrays");
    for (const auto& o : opts) ex.options.push_back(TokenSeq::text(ids_from(o, "options")));
  }
  if (j.contains("gold")) {
    if (!j.at("gold").is_number_integer()) throw std::invalid_argument("gold must be an integer");
    ex.gold = j.at("gold").get<int>();
  }
  if (ex.prompt.empty()) throw std::invalid_argument("prompt_ids is empty");
  if (ex.y_pos.empty() || ex.y_neg.empty()) throw std::invalid_argument("y_pos_ids and y_neg_ids must be nonempty");
  if (ex.y_pos.ids == ex.y_neg.ids) throw std::invalid_argument("y_pos_ids equals y_neg_ids");
  if (ex.gold && (*ex.gold < 0 || *ex.gold >= static_cast<int>(ex.options.size()))) {
    throw std::invalid_argument("gold index outside the option list");
  }
  return ex;
}

}  // namespace

void PreferenceExample::validate(int vocab) const {
  if (prompt.empty()) throw ContractError("example " + id + ": empty prompt");
  if (y_pos.empty() || y_neg.empty()) throw ContractError("example " + id + ": empty continuation");
  if (y_pos.ids == y_neg.ids) throw ContractError("example " + id + ": y_pos equals y_neg");
  prompt.validate(vocab);
  y_pos.validate(vocab);
  y_neg.validate(vocab);
  for (const auto& o : options) o.validate(vocab);
  if (gold && (*gold < 0 || *gold >= static_cast<int>(options.size()))) {
    throw ContractError("example " + id + ": gold index outside the option list");
  }
}

std::vector<PreferenceExample> read_dataset_jsonl(std::istream& is) {
  std::vector<PreferenceExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

std::vector<PreferenceExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  return read_dataset_jsonl(is);
}

void write_dataset_jsonl(std::ostream& os, const std::vector<PreferenceExample>& examples) {
  for (const auto& ex : examples) os << to_json(ex).dump() << '\n';
  if (!os) throw IoError("dataset write failed");
}

void save_dataset(const std::vector<PreferenceExample>& examples, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset_jsonl(os, examples);
}

std::vector<TokenSeq> read_sequences_jsonl(std::istream& is) {
  std::vector<TokenSeq> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      if (!j.is_object() || !j.contains("ids")) throw std::invalid_argument("missing field \"ids\"");
      TokenSeq seq;
      seq.ids = ids_from(j.at("ids"), "ids");
      if (j.contains("modality")) {
        for (const auto& m : j.at("modality")) seq.modality.push_back(modality_from_string(m.get<std::string>()));
      } else {
        seq.modality.assign(seq.ids.size(), Modality::text);
      }
      if (seq.modality.size() != seq.ids.size()) throw std::invalid_argument("modality length differs from ids");
      out.push_back(std::move(seq));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), lineno);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return out;
}

std::vector<TokenSeq> load_sequences(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open corpus " + path.string());
  return read_sequences_jsonl(is);
}

void write_sequences_jsonl(std::ostream& os, const std::vector<TokenSeq>& seqs) {
  for (const auto& seq : seqs) {
    json j;
    j["ids"] = seq.ids;
    json mod = json::array();
    for (Modality m : seq.modality) mod.push_back(std::string(to_string(m)));
    j["modality"] = std::move(mod);
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("corpus write failed");
}

void save_sequences(const std::vector<TokenSeq>& seqs, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_sequences_jsonl(os, seqs);
}

std::string dataset_hash(const std::vector<PreferenceExample>& examples) {
  std::vector<std::uint64_t> per;
  per.reserve(examples.size());
  for (const auto& ex : examples) per.push_back(io::fnv1a(to_json(ex).dump()));
  std::sort(per.begin(), per.end());
  io::Fnv1a h;
  h.update_uint(static_cast<std::uint64_t>(per.size()));
  for (auto v : per) h.update_uint(v);
  return io::hex64(h.digest());
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return io::hex64(io::fnv1a(bytes));
}

}  // namespace grains
