#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "molalign/moldata/molecule.hpp"

namespace molalign::moldata {

struct DatasetRecord {
  std::string id;
  Molecule molecule;
  std::string text;
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::int64_t line)
      : std::runtime_error(what), line_(line) {}
  std::int64_t line() const { return line_; }

 private:
  std::int64_t line_;
};

struct LoadResult {
  std::vector<DatasetRecord> records;
  std::int64_t skipped_invalid_smiles = 0;
  std::vector<std::string> warnings;
};

// One JSON object per line: {"id", "smiles", "coords": [[x,y,z],...] | null, "text"}.
// Malformed lines throw DatasetError carrying the 1-based line number; records
// whose SMILES fail to parse are skipped and counted. Blank lines are ignored.
LoadResult load_dataset(const std::filesystem::path& path);
LoadResult parse_dataset(const std::string& contents);
void save_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::string dataset_line(const DatasetRecord& record);

// --- synthetic corpus -------------------------------------------------------
// Caption facts. rings and double bonds come from the bond graph only; spread
// and flatness come from coordinates only; atom count and halogen presence are
// atom-level facts available to both views.
struct SyntheticFacts {
  int atoms = 0;
  int rings = 0;
  bool halogen = false;
  int double_bonds = 0;  // capped at kMaxDoubleToken
  bool elongated = false;
  bool flat = false;
};

inline constexpr int kMaxDoubleToken = 2;
// Max pairwise distance above which a conformer is "elongated".
inline constexpr double kElongatedThreshold = 5.0;
// Smallest principal standard deviation below which a conformer is "flat".
inline constexpr double kFlatThreshold = 0.35;

bool is_elongated(const Coords& coords);
bool is_flat(const Coords& coords);
SyntheticFacts synthetic_facts(const Molecule& m);
std::string synthetic_caption(const SyntheticFacts& facts);

// Deterministic in (n, seed). Captions are unique within the corpus while the
// fact space allows it.
std::vector<DatasetRecord> gen_synthetic(std::int64_t n, std::uint64_t seed);

}  // namespace molalign::moldata
