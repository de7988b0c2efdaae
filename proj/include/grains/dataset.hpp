#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "grains/model.hpp"

namespace grains {

/// Prompt with a preferred and a dispreferred continuation, optionally
/// carrying multiple-choice options.
struct PreferenceExample {
  std::string id;
  TokenSeq prompt;
  TokenSeq y_pos;
  TokenSeq y_neg;
  std::vector<TokenSeq> options;
  std::optional<int> gold;

  /// y_pos != y_neg, gold inside the option list, every id inside `vocab`.
  void validate(int vocab) const;
};

/// One JSON object per line: {id, prompt_ids, prompt_modality, y_pos_ids,
/// y_neg_ids, options?, gold?}. Blank lines are skipped. Throws ParseError
/// with the 1-based line number on schema violations.
std::vector<PreferenceExample> read_dataset_jsonl(std::istream& is);
std::vector<PreferenceExample> load_dataset(const std::filesystem::path& path);

void write_dataset_jsonl(std::ostream& os, const std::vector<PreferenceExample>& examples);
void save_dataset(const std::vector<PreferenceExample>& examples, const std::filesystem::path& path);

/// Bare token sequences, one {ids, modality} object per line.
std::vector<TokenSeq> read_sequences_jsonl(std::istream& is);
std::vector<TokenSeq> load_sequences(const std::filesystem::path& path);
void write_sequences_jsonl(std::ostream& os, const std::vector<TokenSeq>& seqs);
void save_sequences(const std::vector<TokenSeq>& seqs, const std::filesystem::path& path);

/// Content hash that does not depend on example order.
std::string dataset_hash(const std::vector<PreferenceExample>& examples);

/// FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace grains
