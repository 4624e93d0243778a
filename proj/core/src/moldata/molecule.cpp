#include "molalign/moldata/molecule.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <queue>
#include <set>

namespace molalign::moldata {

int element_index(std::string_view symbol) {
  for (int i = 0; i < kNumElements; ++i)
    if (kElements[static_cast<std::size_t>(i)] == symbol) return i;
  return -1;
}

bool is_halogen(int element) { return element >= 6 && element <= 9; }

ParseError::ParseError(const std::string& what, std::size_t position)
    : std::runtime_error("SMILES parse error at position " + std::to_string(position) + ": " +
                         what),
      position_(position) {}

void Molecule::validate() const {
  const int n = atom_count();
  std::set<std::pair<int, int>> seen;
  for (const auto& b : bonds) {
    if (b.begin < 0 || b.end < 0 || b.begin >= n || b.end >= n) {
      throw std::invalid_argument("bond endpoint out of range");
    }
    if (b.begin == b.end) throw std::invalid_argument("self-bond on atom " + std::to_string(b.begin));
    if (b.order < 1 || b.order > 3) throw std::invalid_argument("bond order must be 1..3");
    auto key = std::minmax(b.begin, b.end);
    if (!seen.insert(key).second) {
      throw std::invalid_argument("duplicate bond " + std::to_string(key.first) + "-" +
                                  std::to_string(key.second));
    }
  }
  for (const auto& a : atoms) {
    if (a.element < 0 || a.element >= kNumElements) throw std::invalid_argument("unknown element");
  }
  if (coords && static_cast<int>(coords->size()) != n) {
    throw std::invalid_argument("coords have " + std::to_string(coords->size()) + " rows for " +
                                std::to_string(n) + " atoms");
  }
}

std::vector<int> Molecule::degrees() const {
  std::vector<int> deg(atoms.size(), 0);
  for (const auto& b : bonds) {
    ++deg[static_cast<std::size_t>(b.begin)];
    ++deg[static_cast<std::size_t>(b.end)];
  }
  return deg;
}

namespace {
std::vector<std::vector<std::pair<int, int>>> adjacency_lists(const Molecule& m) {
  std::vector<std::vector<std::pair<int, int>>> adj(m.atoms.size());
  for (int e = 0; e < static_cast<int>(m.bonds.size()); ++e) {
    const auto& b = m.bonds[static_cast<std::size_t>(e)];
    adj[static_cast<std::size_t>(b.begin)].push_back({b.end, e});
    adj[static_cast<std::size_t>(b.end)].push_back({b.begin, e});
  }
  return adj;
}
}  // namespace

std::vector<bool> Molecule::ring_atoms() const {
  // Bridges via DFS low-link; an atom is in a ring iff it touches a non-bridge bond.
  const auto adj = adjacency_lists(*this);
  const int n = atom_count();
  std::vector<int> disc(static_cast<std::size_t>(n), -1), low(static_cast<std::size_t>(n), 0);
  std::vector<bool> bridge(bonds.size(), false);
  int timer = 0;
  std::function<void(int, int)> dfs = [&](int v, int parent_edge) {
    disc[static_cast<std::size_t>(v)] = low[static_cast<std::size_t>(v)] = timer++;
    for (auto [w, e] : adj[static_cast<std::size_t>(v)]) {
      if (e == parent_edge) continue;
      if (disc[static_cast<std::size_t>(w)] < 0) {
        dfs(w, e);
        low[static_cast<std::size_t>(v)] = std::min(low[static_cast<std::size_t>(v)], low[static_cast<std::size_t>(w)]);
        if (low[static_cast<std::size_t>(w)] > disc[static_cast<std::size_t>(v)]) bridge[static_cast<std::size_t>(e)] = true;
      } else {
        low[static_cast<std::size_t>(v)] = std::min(low[static_cast<std::size_t>(v)], disc[static_cast<std::size_t>(w)]);
      }
    }
  };
  for (int v = 0; v < n; ++v)
    if (disc[static_cast<std::size_t>(v)] < 0) dfs(v, -1);
  std::vector<bool> in_ring(atoms.size(), false);
  for (std::size_t e = 0; e < bonds.size(); ++e) {
    if (bridge[e]) continue;
    in_ring[static_cast<std::size_t>(bonds[e].begin)] = true;
    in_ring[static_cast<std::size_t>(bonds[e].end)] = true;
  }
  return in_ring;
}

int Molecule::component_count() const {
  std::vector<int> parent(atoms.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  int comps = atom_count();
  for (const auto& b : bonds) {
    const int a = find(b.begin), c = find(b.end);
    if (a != c) {
      parent[static_cast<std::size_t>(a)] = c;
      --comps;
    }
  }
  return comps;
}

int Molecule::ring_count() const {
  return static_cast<int>(bonds.size()) - atom_count() + component_count();
}

std::vector<double> Molecule::atom_features(int masked_atom) const {
  const auto deg = degrees();
  const auto ring = ring_atoms();
  std::vector<double> f(atoms.size() * kAtomFeatureDim, 0.0);
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    double* row = f.data() + i * kAtomFeatureDim;
    const int el = static_cast<int>(i) == masked_atom ? kMaskElement : atoms[i].element;
    row[el] = 1.0;
    row[kNumElements + 1 + std::min(deg[i], kMaxDegreeFeature)] = 1.0;
    row[kAtomFeatureDim - 1] = ring[i] ? 1.0 : 0.0;
  }
  return f;
}

std::vector<std::int64_t> Molecule::element_ids(int masked_atom) const {
  std::vector<std::int64_t> ids;
  ids.reserve(atoms.size());
  for (std::size_t i = 0; i < atoms.size(); ++i)
    ids.push_back(static_cast<int>(i) == masked_atom ? kMaskElement : atoms[i].element);
  return ids;
}

Molecule Molecule::permuted(const std::vector<int>& perm) const {
  if (perm.size() != atoms.size()) throw std::invalid_argument("permutation size mismatch");
  std::vector<int> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  Molecule out;
  out.smiles = smiles;
  for (int old : perm) out.atoms.push_back(atoms[static_cast<std::size_t>(old)]);
  for (const auto& b : bonds) {
    out.bonds.push_back({inverse[static_cast<std::size_t>(b.begin)], inverse[static_cast<std::size_t>(b.end)], b.order, b.aromatic});
  }
  if (coords) {
    Coords c;
    for (int old : perm) c.push_back((*coords)[static_cast<std::size_t>(old)]);
    out.coords = std::move(c);
  }
  return out;
}

Molecule parse_smiles(std::string_view s) {
  if (s.empty()) throw ParseError("empty SMILES", 0);
  Molecule m;
  m.smiles = std::string(s);
  int prev = -1;
  int pending = 0;  // explicit bond order awaiting its second atom
  std::vector<std::pair<int, std::size_t>> branches;  // atom, position of '('
  struct Open {
    int atom;
    int order;
    std::size_t position;
  };
  std::map<int, Open> rings;

  auto add_bond = [&](int a, int b, int explicit_order, std::size_t pos) {
    if (a == b) throw ParseError("ring closure bonds an atom to itself", pos);
    for (const auto& e : m.bonds) {
      if ((e.begin == a && e.end == b) || (e.begin == b && e.end == a)) {
        throw ParseError("duplicate bond between atoms " + std::to_string(a) + " and " +
                             std::to_string(b),
                         pos);
      }
    }
    const bool aromatic = explicit_order == 0 && m.atoms[static_cast<std::size_t>(a)].aromatic &&
                          m.atoms[static_cast<std::size_t>(b)].aromatic;
    m.bonds.push_back({a, b, explicit_order == 0 ? 1 : explicit_order, aromatic});
  };

  for (std::size_t pos = 0; pos < s.size(); ++pos) {
    const char c = s[pos];
    if (c == '(') {
      if (prev < 0) throw ParseError("branch without a preceding atom", pos);
      if (pending) throw ParseError("bond symbol before '('", pos);
      branches.push_back({prev, pos});
    } else if (c == ')') {
      if (branches.empty()) throw ParseError("unmatched ')'", pos);
      if (pending) throw ParseError("dangling bond symbol before ')'", pos);
      prev = branches.back().first;
      branches.pop_back();
    } else if (c == '-' || c == '=' || c == '#') {
      if (prev < 0) throw ParseError("bond symbol without a preceding atom", pos);
      if (pending) throw ParseError("consecutive bond symbols", pos);
      pending = c == '-' ? 1 : (c == '=' ? 2 : 3);
    } else if (c >= '0' && c <= '9') {
      if (prev < 0) throw ParseError("ring index without a preceding atom", pos);
      const int digit = c - '0';
      auto it = rings.find(digit);
      if (it == rings.end()) {
        rings[digit] = {prev, pending, pos};
      } else {
        const int order = pending ? pending : it->second.order;
        if (pending && it->second.order && pending != it->second.order) {
          throw ParseError("conflicting ring-closure bond orders", pos);
        }
        add_bond(it->second.atom, prev, order, pos);
        rings.erase(it);
      }
      pending = 0;
    } else if (std::isalpha(static_cast<unsigned char>(c))) {
      std::string symbol(1, c);
      bool aromatic = false;
      if ((c == 'C' || c == 'B') && pos + 1 < s.size() &&
          ((c == 'C' && s[pos + 1] == 'l') || (c == 'B' && s[pos + 1] == 'r'))) {
        symbol += s[pos + 1];
      } else if (std::islower(static_cast<unsigned char>(c))) {
        if (c != 'b' && c != 'c' && c != 'n' && c != 'o' && c != 'p' && c != 's') {
          throw ParseError(std::string("unsupported aromatic atom '") + c + "'", pos);
        }
        aromatic = true;
        symbol[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      }
      const int el = element_index(symbol);
      if (el < 0) throw ParseError("unsupported atom '" + symbol + "'", pos);
      m.atoms.push_back({el, aromatic});
      const int idx = m.atom_count() - 1;
      if (prev >= 0) add_bond(prev, idx, pending, pos);
      pending = 0;
      prev = idx;
      pos += symbol.size() - 1;
    } else {
      throw ParseError(std::string("unsupported character '") + c + "'", pos);
    }
  }
  if (pending) throw ParseError("dangling bond symbol at end", s.size() - 1);
  if (!branches.empty()) throw ParseError("unmatched '('", branches.back().second);
  if (!rings.empty()) {
    throw ParseError("dangling ring index " + std::to_string(rings.begin()->first),
                     rings.begin()->second.position);
  }
  if (m.atoms.empty()) throw ParseError("no atoms", 0);
  return m;
}

std::string write_smiles(const Molecule& m) {
  const int n = m.atom_count();
  if (n == 0) throw std::invalid_argument("write_smiles: empty molecule");
  const auto adj = adjacency_lists(m);
  // Pass 1: DFS tree and ring bonds.
  std::vector<int> order_of(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<std::pair<int, int>>> children(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> ring_bonds(static_cast<std::size_t>(n));  // bond ids per atom
  std::vector<bool> used(m.bonds.size(), false);
  int counter = 0;
  std::function<void(int)> visit = [&](int v) {
    order_of[static_cast<std::size_t>(v)] = counter++;
    for (auto [w, e] : adj[static_cast<std::size_t>(v)]) {
      if (used[static_cast<std::size_t>(e)]) continue;
      used[static_cast<std::size_t>(e)] = true;
      if (order_of[static_cast<std::size_t>(w)] >= 0) {
        ring_bonds[static_cast<std::size_t>(v)].push_back(e);
        ring_bonds[static_cast<std::size_t>(w)].push_back(e);
      } else {
        children[static_cast<std::size_t>(v)].push_back({w, e});
        visit(w);
      }
    }
  };
  std::string out;
  std::map<int, int> digit_of_bond;
  std::set<int> free_digits = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto bond_symbol = [&](int e) -> std::string {
    const int o = m.bonds[static_cast<std::size_t>(e)].order;
    return o == 2 ? "=" : (o == 3 ? "#" : "");
  };
  auto atom_symbol = [&](int v) {
    const auto& a = m.atoms[static_cast<std::size_t>(v)];
    std::string sym(kElements[static_cast<std::size_t>(a.element)]);
    if (a.aromatic) sym[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[0])));
    return sym;
  };
  std::function<void(int)> emit = [&](int v) {
    out += atom_symbol(v);
    for (int e : ring_bonds[static_cast<std::size_t>(v)]) {
      auto it = digit_of_bond.find(e);
      if (it != digit_of_bond.end()) {
        out += bond_symbol(e) + std::to_string(it->second);
        free_digits.insert(it->second);
        digit_of_bond.erase(it);
      } else {
        if (free_digits.empty()) throw std::invalid_argument("write_smiles: more than 9 open rings");
        const int d = *free_digits.begin();
        free_digits.erase(free_digits.begin());
        digit_of_bond[e] = d;
        out += bond_symbol(e) + std::to_string(d);
      }
    }
    const auto& ch = children[static_cast<std::size_t>(v)];
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const bool branch = i + 1 < ch.size();
      if (branch) out += '(';
      out += bond_symbol(ch[i].second);
      emit(ch[i].first);
      if (branch) out += ')';
    }
  };
  for (int start = 0; start < n; ++start) {
    if (order_of[static_cast<std::size_t>(start)] >= 0) continue;
    if (start > 0) throw std::invalid_argument("write_smiles: disconnected graphs are unsupported");
    visit(start);
    emit(start);
  }
  return out;
}

std::vector<double> pairwise_distances(const Coords& c) {
  const std::size_t n = c.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = c[i][0] - c[j][0], dy = c[i][1] - c[j][1], dz = c[i][2] - c[j][2];
      d[i * n + j] = d[j * n + i] = std::sqrt(dx * dx + dy * dy + dz * dz);
    }
  return d;
}

StructureMatrices structure_matrices(const Molecule& m) {
  StructureMatrices s;
  s.n = m.atom_count();
  const auto n = static_cast<std::size_t>(s.n);
  s.adjacency.assign(n * n, 0.0);
  for (const auto& b : m.bonds) {
    s.adjacency[static_cast<std::size_t>(b.begin) * n + static_cast<std::size_t>(b.end)] = b.order;
    s.adjacency[static_cast<std::size_t>(b.end) * n + static_cast<std::size_t>(b.begin)] = b.order;
  }
  if (m.coords) {
    s.distance = pairwise_distances(*m.coords);
    return s;
  }
  s.distance.assign(n * n, kUnreachableDistance);
  const auto adj = adjacency_lists(m);
  for (std::size_t src = 0; src < n; ++src) {
    std::vector<int> hops(n, -1);
    std::queue<int> q;
    hops[src] = 0;
    q.push(static_cast<int>(src));
    while (!q.empty()) {
      const int v = q.front();
      q.pop();
      for (auto [w, e] : adj[static_cast<std::size_t>(v)]) {
        (void)e;
        if (hops[static_cast<std::size_t>(w)] < 0) {
          hops[static_cast<std::size_t>(w)] = hops[static_cast<std::size_t>(v)] + 1;
          q.push(w);
        }
      }
    }
    for (std::size_t j = 0; j < n; ++j)
      if (hops[j] >= 0) s.distance[src * n + j] = hops[j];
  }
  return s;
}

}  // namespace molalign::moldata
