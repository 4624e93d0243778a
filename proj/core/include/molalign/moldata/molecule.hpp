#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace molalign::moldata {

// Organic-subset elements, in feature order.
inline constexpr std::array<std::string_view, 10> kElements = {"B", "C",  "N",  "O", "P",
                                                               "S", "F", "Cl", "Br", "I"};
inline constexpr int kNumElements = static_cast<int>(kElements.size());
// Extra element slot used only to hide an atom's identity during encoder pretraining.
inline constexpr int kMaskElement = kNumElements;
inline constexpr int kMaxDegreeFeature = 5;
// one-hot element (+mask slot) | one-hot degree 0..5 | in-ring flag
inline constexpr int kAtomFeatureDim = kNumElements + 1 + kMaxDegreeFeature + 1 + 1;
// Distance used for atom pairs with no connecting path when coordinates are absent.
inline constexpr double kUnreachableDistance = 1e3;

int element_index(std::string_view symbol);  // -1 when unsupported
bool is_halogen(int element);

struct Atom {
  int element = 1;
  bool aromatic = false;
};

struct Bond {
  int begin = 0;
  int end = 0;
  int order = 1;  // 1, 2 or 3
  bool aromatic = false;

  friend bool operator==(const Bond&, const Bond&) = default;
};

using Coords = std::vector<std::array<double, 3>>;

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class Molecule {
 public:
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  std::optional<Coords> coords;
  std::string smiles;

  int atom_count() const { return static_cast<int>(atoms.size()); }
  bool has_coords() const { return coords.has_value(); }

  // Throws std::invalid_argument when endpoints are out of range, a bond is a
  // self-loop or duplicated, or coords do not have one row per atom.
  void validate() const;

  std::vector<int> degrees() const;
  // Atoms lying on at least one cycle.
  std::vector<bool> ring_atoms() const;
  // Cyclomatic number |E| - |V| + components.
  int ring_count() const;
  int component_count() const;

  // Row-major [atoms, kAtomFeatureDim]. masked_atom >= 0 moves that atom's
  // element bit to the mask slot.
  std::vector<double> atom_features(int masked_atom = -1) const;
  std::vector<std::int64_t> element_ids(int masked_atom = -1) const;

  // Same molecule with atoms renumbered: new atom i is old atom perm[i].
  Molecule permuted(const std::vector<int>& perm) const;
};

// Parses the supported SMILES subset: organic-set atoms, aromatic lowercase
// (stored as order-1 bonds with an aromatic flag, not kekulised), bond symbols
// - = #, branches and single-digit ring closures.
Molecule parse_smiles(std::string_view smiles);

// Writes a SMILES string for the bond graph by depth-first traversal from atom 0.
// Parsing the result yields the same graph with atoms in traversal order.
std::string write_smiles(const Molecule& m);

struct StructureMatrices {
  int n = 0;
  std::vector<double> adjacency;  // [n, n] bond order or 0
  std::vector<double> distance;   // [n, n] Euclidean, or hop counts without coords
};

StructureMatrices structure_matrices(const Molecule& m);

// Euclidean distances from coords only; requires coords.
std::vector<double> pairwise_distances(const Coords& coords);

}  // namespace molalign::moldata
