#include "molalign/moldata/dataset.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <sstream>

#include "molalign/numerics/rng.hpp"

namespace molalign::moldata {

using json = nlohmann::json;
using numerics::Rng;

namespace {

DatasetRecord record_from_json(const json& j, std::int64_t line) {
  auto need_string = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw DatasetError("line " + std::to_string(line) + ": field '" + key + "' missing or not a string", line);
    }
    return j[key].get<std::string>();
  };
  DatasetRecord r;
  r.id = need_string("id");
  const auto smiles = need_string("smiles");
  r.text = need_string("text");
  if (r.text.empty()) throw DatasetError("line " + std::to_string(line) + ": empty text", line);
  r.molecule = parse_smiles(smiles);  // ParseError handled by caller
  if (j.contains("coords") && !j["coords"].is_null()) {
    const auto& c = j["coords"];
    if (!c.is_array()) throw DatasetError("line " + std::to_string(line) + ": coords must be an array or null", line);
    Coords coords;
    for (const auto& row : c) {
      if (!row.is_array() || row.size() != 3) {
        throw DatasetError("line " + std::to_string(line) + ": each coords row needs 3 numbers", line);
      }
      std::array<double, 3> xyz{};
      for (std::size_t k = 0; k < 3; ++k) {
        if (!row[k].is_number()) throw DatasetError("line " + std::to_string(line) + ": non-numeric coordinate", line);
        xyz[k] = row[k].get<double>();
      }
      coords.push_back(xyz);
    }
    if (static_cast<int>(coords.size()) != r.molecule.atom_count()) {
      throw DatasetError("line " + std::to_string(line) + ": coords have " + std::to_string(coords.size()) +
                             " rows but SMILES has " + std::to_string(r.molecule.atom_count()) + " atoms",
                         line);
    }
    r.molecule.coords = std::move(coords);
  }
  return r;
}

}  // namespace

LoadResult parse_dataset(const std::string& contents) {
  LoadResult out;
  std::istringstream in(contents);
  std::string text;
  std::int64_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DatasetError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")", line);
    }
    if (!j.is_object()) throw DatasetError("line " + std::to_string(line) + ": expected a JSON object", line);
    try {
      out.records.push_back(record_from_json(j, line));
    } catch (const ParseError& e) {
      ++out.skipped_invalid_smiles;
      out.warnings.push_back("line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

LoadResult load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open dataset " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str());
}

std::string dataset_line(const DatasetRecord& r) {
  json j;
  j["id"] = r.id;
  j["smiles"] = r.molecule.smiles;
  if (r.molecule.coords) {
    json rows = json::array();
    for (const auto& xyz : *r.molecule.coords) rows.push_back({xyz[0], xyz[1], xyz[2]});
    j["coords"] = std::move(rows);
  } else {
    j["coords"] = nullptr;
  }
  j["text"] = r.text;
  return j.dump();
}

void save_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write dataset " + path.string());
  for (const auto& r : records) out << dataset_line(r) << '\n';
  if (!out) throw std::ios_base::failure("write failed for " + path.string());
}

bool is_elongated(const Coords& coords) {
  const auto d = pairwise_distances(coords);
  return !d.empty() && *std::max_element(d.begin(), d.end()) > kElongatedThreshold;
}

bool is_flat(const Coords& coords) {
  const auto n = static_cast<Eigen::Index>(coords.size());
  if (n < 3) return true;
  Eigen::MatrixXd x(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < 3; ++k) x(i, k) = coords[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  x.rowwise() -= x.colwise().mean();
  const Eigen::Matrix3d cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, solver.eigenvalues()(0))) < kFlatThreshold;
}

SyntheticFacts synthetic_facts(const Molecule& m) {
  if (!m.coords) throw std::invalid_argument("synthetic_facts: molecule has no coords");
  SyntheticFacts f;
  f.atoms = m.atom_count();
  f.rings = m.ring_count();
  f.halogen = std::any_of(m.atoms.begin(), m.atoms.end(), [](const Atom& a) { return is_halogen(a.element); });
  f.double_bonds = static_cast<int>(std::count_if(m.bonds.begin(), m.bonds.end(), [](const Bond& b) { return b.order == 2; }));
  f.double_bonds = std::min(f.double_bonds, kMaxDoubleToken);
  f.elongated = is_elongated(*m.coords);
  f.flat = is_flat(*m.coords);
  return f;
}

std::string synthetic_caption(const SyntheticFacts& f) {
  std::ostringstream os;
  os << "molecule with atoms" << f.atoms << " , rings" << f.rings << " , double" << f.double_bonds
     << " , " << (f.halogen ? "halogenated" : "nonhalogenated") << " ; conformer "
     << (f.elongated ? "elongated" : "compact") << " and " << (f.flat ? "flat" : "bulky") << " .";
  return os.str();
}

namespace {

// Heavy-atom skeleton: random tree plus up to 3 ring-closing bonds, degree <= 4.
Molecule random_graph(Rng& rng) {
  const int n = 5 + static_cast<int>(rng.uniform_int(8));
  Molecule m;
  m.atoms.resize(static_cast<std::size_t>(n));
  std::vector<int> valence(static_cast<std::size_t>(n), 0);
  std::set<std::pair<int, int>> edges;
  auto connect = [&](int a, int b) {
    m.bonds.push_back({a, b, 1, false});
    ++valence[static_cast<std::size_t>(a)];
    ++valence[static_cast<std::size_t>(b)];
    edges.insert(std::minmax(a, b));
  };
  for (int i = 1; i < n; ++i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i)));
    for (int tries = 0; valence[static_cast<std::size_t>(j)] >= 3 && tries < 16; ++tries) {
      j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i)));
    }
    connect(j, i);
  }
  const int want_rings = static_cast<int>(rng.uniform_int(4));
  for (int made = 0, tries = 0; made < want_rings && tries < 64; ++tries) {
    const int a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    const int b = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    if (a == b || edges.count(std::minmax(a, b))) continue;
    if (valence[static_cast<std::size_t>(a)] >= 3 || valence[static_cast<std::size_t>(b)] >= 3) continue;
    connect(a, b);
    ++made;
  }
  for (auto& b : m.bonds) {
    auto& va = valence[static_cast<std::size_t>(b.begin)];
    auto& vb = valence[static_cast<std::size_t>(b.end)];
    if (va < 4 && vb < 4 && rng.bernoulli(0.15)) {
      b.order = 2;
      ++va;
      ++vb;
    }
  }
  const auto deg = m.degrees();
  // element indices: B C N O P S F Cl Br I
  for (int i = 0; i < n; ++i) {
    auto& atom = m.atoms[static_cast<std::size_t>(i)];
    const bool terminal_single = deg[static_cast<std::size_t>(i)] == 1 && valence[static_cast<std::size_t>(i)] == 1;
    if (terminal_single && rng.bernoulli(0.2)) {
      atom.element = 6 + static_cast<int>(rng.uniform_int(4));
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.70) atom.element = 1;
    else if (u < 0.82) atom.element = 2;
    else if (u < 0.94) atom.element = 3;
    else if (u < 0.98) atom.element = 5;
    else atom.element = 4;
  }
  return m;
}

std::array<double, 3> rotate(const Eigen::Matrix3d& r, const std::array<double, 3>& p) {
  const Eigen::Vector3d v = r * Eigen::Vector3d(p[0], p[1], p[2]);
  return {v(0), v(1), v(2)};
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

// Anisotropic Gaussian cloud, randomly rotated and centred.
Coords random_conformer(int n, Rng& rng) {
  const bool elongated = rng.bernoulli(0.5);
  const bool flat = rng.bernoulli(0.5);
  const double sx = elongated ? rng.uniform(2.0, 2.6) : rng.uniform(0.6, 0.9);
  const double sy = rng.uniform(0.6, 0.9);
  const double sz = flat ? rng.uniform(0.03, 0.12) : rng.uniform(0.6, 0.9);
  const auto r = random_rotation(rng);
  Coords c(static_cast<std::size_t>(n));
  std::array<double, 3> centre{0, 0, 0};
  for (auto& p : c) {
    p = rotate(r, {sx * rng.normal(), sy * rng.normal(), sz * rng.normal()});
    for (int k = 0; k < 3; ++k) centre[static_cast<std::size_t>(k)] += p[static_cast<std::size_t>(k)] / n;
  }
  for (auto& p : c)
    for (int k = 0; k < 3; ++k) p[static_cast<std::size_t>(k)] -= centre[static_cast<std::size_t>(k)];
  return c;
}

}  // namespace

std::vector<DatasetRecord> gen_synthetic(std::int64_t n, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("gen_synthetic: negative count");
  Rng rng(seed);
  std::vector<DatasetRecord> out;
  std::set<std::string> captions;
  constexpr int kUniqueTries = 200;
  while (static_cast<std::int64_t>(out.size()) < n) {
    DatasetRecord rec;
    for (int attempt = 0;; ++attempt) {
      const Molecule graph = random_graph(rng);
      Molecule m = parse_smiles(write_smiles(graph));
      m.coords = random_conformer(m.atom_count(), rng);
      std::string text = synthetic_caption(synthetic_facts(m));
      if (!captions.count(text) || attempt >= kUniqueTries) {
        captions.insert(text);
        rec.molecule = std::move(m);
        rec.text = std::move(text);
        break;
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06lld", static_cast<long long>(out.size()));
    rec.id = id;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace molalign::moldata
