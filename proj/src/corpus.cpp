#include "retroflow/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "retroflow/canonical.hpp"
#include "retroflow/templates.hpp"

namespace retroflow {

namespace {

struct Family {
    const char* name;
    const char* skeleton;  // fully mapped reaction SMILES
    int site1;             // map number of the first substituent site
    int site2;             // map number of the second substituent site
};

// Each skeleton carries full product atom maps; leaving-group atoms use
// reactant-only maps (90+). Substituents replace one H at the site atoms.
const Family kFamilies[] = {
    {"ester_from_acid_chloride",
     "[CH3:1][OH:2].[Cl:90][C:3]([CH3:5])=[O:4]>>[CH3:1][O:2][C:3]([CH3:5])=[O:4]", 1, 5},
    {"amide_from_acid_chloride",
     "[CH3:1][NH2:2].[Cl:90][C:3]([CH3:5])=[O:4]>>[CH3:1][NH:2][C:3]([CH3:5])=[O:4]", 1, 5},
    {"williamson_ether",
     "[CH3:1][OH:2].[Br:90][CH2:3][CH3:4]>>[CH3:1][O:2][CH2:3][CH3:4]", 1, 4},
    {"n_alkylation",
     "[CH3:1][NH2:2].[Br:90][CH2:3][CH3:4]>>[CH3:1][NH:2][CH2:3][CH3:4]", 1, 4},
    {"biaryl_coupling",
     "OB(O)[c:1]1[cH:2][cH:3][c:4]([CH3:7])[cH:5][cH:6]1."
     "[Br:90][c:11]1[cH:12][cH:13][c:14]([CH3:17])[cH:15][cH:16]1>>"
     "[CH3:7][c:4]1[cH:3][cH:2][c:1](-[c:11]2[cH:12][cH:13][c:14]([CH3:17])[cH:15][cH:16]2)"
     "[cH:6][cH:5]1",
     7, 17},
    {"reductive_amination",
     "[CH3:1][C:2](=[O:90])[CH3:3].[NH2:4][CH3:5]>>[CH3:1][CH:2]([NH:4][CH3:5])[CH3:3]", 1,
     5},
    {"sulfonamide",
     "[NH2:1][CH3:2].[Cl:90][S:3](=[O:4])(=[O:5])[CH3:6]>>"
     "[CH3:2][NH:1][S:3](=[O:4])(=[O:5])[CH3:6]",
     2, 6},
    {"fischer_ester",
     "[CH3:1][OH:2].[OH:90][C:3]([CH3:5])=[O:4]>>[CH3:1][O:2][C:3]([CH3:5])=[O:4]", 1, 5},
    {"urea_from_isocyanate",
     "[CH3:1][NH2:2].[N:3](=[C:4]=[O:5])[CH3:6]>>[CH3:1][NH:2][C:4](=[O:5])[NH:3][CH3:6]",
     1, 6},
    {"thioether",
     "[CH3:1][SH:2].[Br:90][CH2:3][CH3:4]>>[CH3:1][S:2][CH2:3][CH3:4]", 1, 4},
    {"imine_condensation",
     "[CH3:1][CH:2]=[O:90].[NH2:3][CH3:4]>>[CH3:1][CH:2]=[N:3][CH3:4]", 1, 4},
    {"aryl_amination",
     "[Br:90][c:1]1[cH:2][cH:3][c:4]([CH3:7])[cH:5][cH:6]1.[NH2:8][CH3:9]>>"
     "[CH3:9][NH:8][c:1]1[cH:2][cH:3][c:4]([CH3:7])[cH:5][cH:6]1",
     7, 9},
};

// Substituents attach through atom 0 by a new single bond; the empty
// string leaves the site as written in the skeleton.
const char* kSubstituents[] = {"", "C", "CC", "CCC", "C(C)C", "c1ccccc1", "CO"};
constexpr int kSubstituentCount = 7;
constexpr int kPerFamily = 25;

int find_map_atom(const MolGraph& g, int map_number) {
    for (int i = 0; i < g.num_atoms(); ++i)
        if (g.atoms[i].map_number == map_number) return i;
    return -1;
}

// Grafts the fragment onto the atom carrying site_map, consuming one
// implicit H at each end of the new bond. Fragment atoms take map numbers
// base_map, base_map+1, ... so both reaction sides stay aligned.
void attach_fragment(MolGraph& g, int site_map, const MolGraph& frag, int base_map) {
    int site = find_map_atom(g, site_map);
    if (site < 0) throw std::runtime_error("corpus family: site map not found");
    if (g.atoms[site].implicit_h < 1 || frag.atoms[0].implicit_h < 1)
        throw std::runtime_error("corpus family: no H available for attachment");
    int offset = g.num_atoms();
    for (int i = 0; i < frag.num_atoms(); ++i) {
        Atom a = frag.atoms[i];
        a.map_number = base_map + i;
        g.add_atom(a);
    }
    for (const Bond& b : frag.bonds) g.add_bond(b.a + offset, b.b + offset, b.order);
    g.add_bond(site, offset, BondOrder::Single);
    g.atoms[site].implicit_h -= 1;
    g.atoms[offset].implicit_h -= 1;
}

void attach_to_reaction(ReactionRecord& r, int site_map, const std::string& frag_smiles,
                        int base_map) {
    if (frag_smiles.empty()) return;
    MolGraph frag = parse_smiles(frag_smiles);
    attach_fragment(r.product, site_map, frag, base_map);
    bool placed = false;
    for (MolGraph& reactant : r.reactants) {
        if (find_map_atom(reactant, site_map) < 0) continue;
        attach_fragment(reactant, site_map, frag, base_map);
        placed = true;
    }
    if (!placed) throw std::runtime_error("corpus family: site missing on reactant side");
}

std::string instantiate(const Family& fam, int r1, int r2) {
    ReactionRecord r = parse_reaction(fam.skeleton);
    attach_to_reaction(r, fam.site1, kSubstituents[r1], 60);
    attach_to_reaction(r, fam.site2, kSubstituents[r2], 75);
    std::string line = write_reaction(r);

    // Validate before accepting: the line must reparse, and its template
    // must reproduce the reactants when applied back at the origin match.
    ReactionRecord back = parse_reaction(line);
    Match origin;
    Template t = extract_template(back, 1, &origin);
    ApplyResult res = apply_template(t, back.product, origin);
    if (!res.ok) throw std::runtime_error("corpus family: replay failed: " + line);
    std::multiset<std::string> want, got;
    for (const MolGraph& m : back.reactants) want.insert(canonical_key(m));
    for (const MolGraph& m : res.reactants) got.insert(canonical_key(m));
    if (want != got) throw std::runtime_error("corpus family: replay mismatch: " + line);
    return line;
}

}  // namespace

std::string reaction_key(const std::vector<MolGraph>& reactants, const MolGraph& product) {
    return canonical_multiset_key(reactants) + ">>" + canonical_key(product);
}

std::string reaction_key(const ReactionRecord& r) {
    return reaction_key(r.reactants, r.product);
}

CorpusSplits generate_corpus(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    CorpusSplits splits;
    std::set<std::string> seen;
    for (const Family& fam : kFamilies) {
        std::vector<std::pair<int, int>> combos;
        for (int a = 0; a < kSubstituentCount; ++a)
            for (int b = 0; b < kSubstituentCount; ++b) combos.push_back({a, b});
        std::shuffle(combos.begin(), combos.end(), rng);
        std::vector<std::string> lines;
        for (const auto& [a, b] : combos) {
            if (static_cast<int>(lines.size()) >= kPerFamily) break;
            std::string line = instantiate(fam, a, b);
            if (!seen.insert(reaction_key(parse_reaction(line))).second) continue;
            lines.push_back(line);
        }
        // 20/2/3 per family so every family appears in every split.
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (i < 20)
                splits.train.push_back(lines[i]);
            else if (i < 22)
                splits.val.push_back(lines[i]);
            else
                splits.test.push_back(lines[i]);
        }
    }
    return splits;
}

void write_corpus(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    for (const std::string& line : lines) out << line << "\n";
}

std::vector<ReactionRecord> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read corpus file: " + path);
    std::vector<ReactionRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        try {
            records.push_back(parse_reaction(line));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace retroflow
