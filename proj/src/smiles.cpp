#include "retroflow/smiles.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

namespace retroflow {

namespace {

bool is_aromatic_symbol_char(char c) {
    return c == 'b' || c == 'c' || c == 'n' || c == 'o' || c == 'p' || c == 's';
}

/// Implicit-H count a bare (unbracketed) atom receives from the parser.
/// Aromatic atoms reserve one valence unit for the delocalized system;
/// others take the smallest default valence covering their bond sum.
/// Returns -1 when no default valence fits (caller reports overflow).
int bare_atom_fill(const std::string& symbol, bool aromatic, int bond_sum) {
    const auto& vals = default_valences(symbol);
    if (aromatic) {
        return std::max(0, vals.front() - bond_sum - 1);
    }
    for (int v : vals) {
        if (v >= bond_sum) return v - bond_sum;
    }
    return -1;
}

struct RingSlot {
    int atom = -1;
    bool has_order = false;
    BondOrder order = BondOrder::Single;
    std::size_t offset = 0;
};

class Parser {
public:
    explicit Parser(const std::string& text) : text_(text) {}

    MolGraph run() {
        if (text_.empty()) throw ParseError(ParseErrorKind::Syntax, 0, "empty SMILES");
        while (pos_ < text_.size()) step();
        if (!stack_.empty())
            throw ParseError(ParseErrorKind::Syntax, text_.size(), "unclosed branch");
        if (pending_)
            throw ParseError(ParseErrorKind::Syntax, pending_offset_, "dangling bond symbol");
        for (const auto& [num, slot] : rings_) {
            (void)num;
            throw ParseError(ParseErrorKind::Syntax, slot.offset, "unclosed ring bond");
        }
        fill_and_check();
        return std::move(g_);
    }

private:
    void step() {
        char c = text_[pos_];
        if (c == '(') {
            if (prev_ < 0 || pending_)
                throw ParseError(ParseErrorKind::Syntax, pos_, "branch open without atom");
            stack_.push_back(prev_);
            ++pos_;
        } else if (c == ')') {
            if (stack_.empty())
                throw ParseError(ParseErrorKind::Syntax, pos_, "unmatched ')'");
            if (pending_)
                throw ParseError(ParseErrorKind::Syntax, pending_offset_, "bond before ')'");
            prev_ = stack_.back();
            stack_.pop_back();
            ++pos_;
        } else if (c == '.') {
            if (pending_)
                throw ParseError(ParseErrorKind::Syntax, pending_offset_, "bond before '.'");
            prev_ = -1;
            ++pos_;
        } else if (c == '-' || c == '=' || c == '#' || c == ':') {
            if (pending_) throw ParseError(ParseErrorKind::Syntax, pos_, "double bond symbol");
            pending_ = true;
            pending_offset_ = pos_;
            pending_order_ = c == '-'   ? BondOrder::Single
                             : c == '=' ? BondOrder::Double
                             : c == '#' ? BondOrder::Triple
                                        : BondOrder::Aromatic;
            ++pos_;
        } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '%') {
            ring_token();
        } else if (c == '[') {
            bracket_atom();
        } else if (c == '/' || c == '\\' || c == '@') {
            throw ParseError(ParseErrorKind::Syntax, pos_, "stereochemistry unsupported");
        } else {
            bare_atom();
        }
    }

    void ring_token() {
        std::size_t off = pos_;
        int num;
        if (text_[pos_] == '%') {
            if (pos_ + 2 >= text_.size() ||
                !std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])) ||
                !std::isdigit(static_cast<unsigned char>(text_[pos_ + 2])))
                throw ParseError(ParseErrorKind::Syntax, pos_, "'%' needs two digits");
            num = (text_[pos_ + 1] - '0') * 10 + (text_[pos_ + 2] - '0');
            pos_ += 3;
        } else {
            num = text_[pos_] - '0';
            ++pos_;
        }
        if (prev_ < 0)
            throw ParseError(ParseErrorKind::Syntax, off, "ring bond before any atom");
        auto it = rings_.find(num);
        if (it == rings_.end()) {
            RingSlot slot;
            slot.atom = prev_;
            slot.has_order = pending_;
            slot.order = pending_order_;
            slot.offset = off;
            rings_[num] = slot;
            pending_ = false;
            return;
        }
        RingSlot slot = it->second;
        rings_.erase(it);
        if (slot.atom == prev_)
            throw ParseError(ParseErrorKind::Syntax, off, "ring bond to self");
        BondOrder order;
        if (slot.has_order && pending_) {
            if (slot.order != pending_order_)
                throw ParseError(ParseErrorKind::Syntax, off, "ring bond order mismatch");
            order = slot.order;
        } else if (slot.has_order) {
            order = slot.order;
        } else if (pending_) {
            order = pending_order_;
        } else {
            order = (g_.atoms[slot.atom].aromatic && g_.atoms[prev_].aromatic)
                        ? BondOrder::Aromatic
                        : BondOrder::Single;
        }
        pending_ = false;
        if (g_.find_bond(slot.atom, prev_) >= 0)
            throw ParseError(ParseErrorKind::Syntax, off, "duplicate ring bond");
        g_.add_bond(slot.atom, prev_, order);
    }

    void bare_atom() {
        std::size_t off = pos_;
        std::string sym;
        bool aromatic = false;
        char c = text_[pos_];
        if (c == 'C' && pos_ + 1 < text_.size() && text_[pos_ + 1] == 'l') {
            sym = "Cl";
            pos_ += 2;
        } else if (c == 'B' && pos_ + 1 < text_.size() && text_[pos_ + 1] == 'r') {
            sym = "Br";
            pos_ += 2;
        } else if (std::isupper(static_cast<unsigned char>(c))) {
            sym = std::string(1, c);
            ++pos_;
        } else if (is_aromatic_symbol_char(c)) {
            sym = std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
            aromatic = true;
            ++pos_;
        } else {
            throw ParseError(ParseErrorKind::Syntax, pos_,
                             std::string("unexpected character '") + c + "'");
        }
        if (!is_supported_element(sym))
            throw ParseError(ParseErrorKind::UnsupportedElement, off, "unsupported element " + sym);
        Atom a;
        a.symbol = sym;
        a.aromatic = aromatic;
        a.implicit_h = -1;  // marks "fill later"
        attach(std::move(a), off);
    }

    void bracket_atom() {
        std::size_t open = pos_;
        ++pos_;  // consume '['
        if (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_])))
            throw ParseError(ParseErrorKind::Syntax, pos_, "isotopes unsupported");
        if (pos_ >= text_.size())
            throw ParseError(ParseErrorKind::Syntax, open, "unterminated bracket atom");

        std::string sym;
        bool aromatic = false;
        char c = text_[pos_];
        if (std::isupper(static_cast<unsigned char>(c))) {
            sym = std::string(1, c);
            ++pos_;
            if (pos_ < text_.size() && std::islower(static_cast<unsigned char>(text_[pos_]))) {
                std::string two = sym + text_[pos_];
                // Take the second letter when it completes a supported symbol
                // or is clearly part of a foreign one (so [Se] names "Se").
                if (is_supported_element(two) || !is_aromatic_symbol_char(text_[pos_])) {
                    sym = two;
                    ++pos_;
                }
            }
        } else if (is_aromatic_symbol_char(c)) {
            sym = std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
            aromatic = true;
            ++pos_;
        } else {
            throw ParseError(ParseErrorKind::Syntax, pos_, "bad bracket atom symbol");
        }
        if (!is_supported_element(sym))
            throw ParseError(ParseErrorKind::UnsupportedElement, open + 1,
                             "unsupported element " + sym);

        Atom a;
        a.symbol = sym;
        a.aromatic = aromatic;
        a.implicit_h = 0;

        if (pos_ < text_.size() && text_[pos_] == '@')
            throw ParseError(ParseErrorKind::Syntax, pos_, "stereochemistry unsupported");

        if (pos_ < text_.size() && text_[pos_] == 'H') {
            ++pos_;
            a.implicit_h = 1;
            if (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                a.implicit_h = 0;
                while (pos_ < text_.size() &&
                       std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                    a.implicit_h = a.implicit_h * 10 + (text_[pos_] - '0');
                    ++pos_;
                }
            }
        }

        if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) {
            char sign_char = text_[pos_];
            int sign = sign_char == '+' ? 1 : -1;
            ++pos_;
            if (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                int mag = 0;
                while (pos_ < text_.size() &&
                       std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                    mag = mag * 10 + (text_[pos_] - '0');
                    ++pos_;
                }
                a.formal_charge = sign * mag;
            } else {
                int mag = 1;
                while (pos_ < text_.size() && text_[pos_] == sign_char) {
                    ++mag;
                    ++pos_;
                }
                a.formal_charge = sign * mag;
            }
        }

        if (pos_ < text_.size() && text_[pos_] == ':') {
            ++pos_;
            if (pos_ >= text_.size() || !std::isdigit(static_cast<unsigned char>(text_[pos_])))
                throw ParseError(ParseErrorKind::Syntax, pos_, "atom map needs digits");
            int map = 0;
            while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                map = map * 10 + (text_[pos_] - '0');
                ++pos_;
            }
            if (map == 0)
                throw ParseError(ParseErrorKind::Syntax, open, "atom map must be positive");
            a.map_number = map;
        }

        if (pos_ >= text_.size() || text_[pos_] != ']')
            throw ParseError(ParseErrorKind::Syntax, pos_, "expected ']'");
        ++pos_;
        attach(std::move(a), open);
    }

    void attach(Atom a, std::size_t off) {
        bool arom_new = a.aromatic;
        int idx = g_.add_atom(std::move(a));
        atom_offset_.push_back(off);
        if (prev_ >= 0) {
            BondOrder order;
            if (pending_) {
                order = pending_order_;
            } else {
                order = (g_.atoms[prev_].aromatic && arom_new) ? BondOrder::Aromatic
                                                               : BondOrder::Single;
            }
            g_.add_bond(prev_, idx, order);
        } else if (pending_) {
            throw ParseError(ParseErrorKind::Syntax, pending_offset_, "bond with no left atom");
        }
        pending_ = false;
        prev_ = idx;
    }

    void fill_and_check() {
        for (int i = 0; i < g_.num_atoms(); ++i) {
            Atom& a = g_.atoms[i];
            int bond_sum = g_.valence_used(i);
            if (a.implicit_h < 0) {  // bare atom: fill to default valence
                int h = bare_atom_fill(a.symbol, a.aromatic, bond_sum);
                if (h < 0)
                    throw ParseError(ParseErrorKind::ValenceOverflow, atom_offset_[i],
                                     "no default valence fits " + a.symbol);
                a.implicit_h = h;
            }
            if (bond_sum + a.implicit_h > max_valence(a.symbol, a.formal_charge))
                throw ParseError(ParseErrorKind::ValenceOverflow, atom_offset_[i],
                                 "valence overflow on " + a.symbol);
        }
    }

    const std::string& text_;
    std::size_t pos_ = 0;
    MolGraph g_;
    std::vector<std::size_t> atom_offset_;
    std::vector<int> stack_;
    int prev_ = -1;
    bool pending_ = false;
    BondOrder pending_order_ = BondOrder::Single;
    std::size_t pending_offset_ = 0;
    std::map<int, RingSlot> rings_;
};

char bond_char(BondOrder o) {
    switch (o) {
        case BondOrder::Single: return '-';
        case BondOrder::Double: return '=';
        case BondOrder::Triple: return '#';
        case BondOrder::Aromatic: return ':';
    }
    return '-';
}

/// True when the bond between its two atoms needs no explicit symbol.
bool bond_is_default(const MolGraph& g, const Bond& bond) {
    bool both_arom = g.atoms[bond.a].aromatic && g.atoms[bond.b].aromatic;
    if (bond.order == BondOrder::Aromatic) return both_arom;
    if (bond.order == BondOrder::Single) return !both_arom;
    return false;
}

std::string atom_token(const MolGraph& g, int i) {
    const Atom& a = g.atoms[i];
    std::string sym = a.symbol;
    if (a.aromatic)
        for (char& ch : sym) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    bool bare_ok = a.formal_charge == 0 && a.map_number == 0 &&
                   bare_atom_fill(a.symbol, a.aromatic, g.valence_used(i)) == a.implicit_h;
    if (bare_ok) return sym;
    std::string out = "[" + sym;
    if (a.implicit_h == 1)
        out += "H";
    else if (a.implicit_h > 1)
        out += "H" + std::to_string(a.implicit_h);
    if (a.formal_charge == 1)
        out += "+";
    else if (a.formal_charge == -1)
        out += "-";
    else if (a.formal_charge > 1)
        out += "+" + std::to_string(a.formal_charge);
    else if (a.formal_charge < -1)
        out += "-" + std::to_string(-a.formal_charge);
    if (a.map_number > 0) out += ":" + std::to_string(a.map_number);
    return out + "]";
}

/// Two-pass writer: first a DFS marks spanning-tree bonds (everything else
/// becomes a ring closure), then a second DFS in the same order emits atom
/// tokens, ring digits at both closure endpoints, and parenthesized branches.
class Writer {
public:
    explicit Writer(const MolGraph& g) : g_(g) {}

    std::string run() {
        visited_.assign(g_.num_atoms(), false);
        is_tree_.assign(g_.num_bonds(), false);
        for (int i = 0; i < g_.num_atoms(); ++i)
            if (!visited_[i]) mark_tree(i);

        ring_num_.assign(g_.num_bonds(), -1);
        visited_.assign(g_.num_atoms(), false);
        std::string out;
        bool first = true;
        for (int i = 0; i < g_.num_atoms(); ++i) {
            if (visited_[i]) continue;
            if (!first) out += ".";
            first = false;
            emit(i, -1, out);
        }
        return out;
    }

private:
    void mark_tree(int atom) {
        visited_[atom] = true;
        for (const auto& [nbr, bidx] : g_.neighbors(atom)) {
            if (!visited_[nbr]) {
                is_tree_[bidx] = true;
                mark_tree(nbr);
            }
        }
    }

    void emit(int atom, int parent_bond, std::string& out) {
        visited_[atom] = true;
        out += atom_token(g_, atom);

        for (const auto& [nbr, bidx] : g_.neighbors(atom)) {
            (void)nbr;
            if (is_tree_[bidx]) continue;
            if (ring_num_[bidx] < 0) {
                ring_num_[bidx] = allocate_ring_number();
                if (!bond_is_default(g_, g_.bonds[bidx]))
                    out += bond_char(g_.bonds[bidx].order);
                out += ring_digit(ring_num_[bidx]);
            } else {
                out += ring_digit(ring_num_[bidx]);
                in_use_.erase(ring_num_[bidx]);
            }
        }

        std::vector<std::pair<int, int>> children;
        for (const auto& [nbr, bidx] : g_.neighbors(atom)) {
            if (bidx == parent_bond || !is_tree_[bidx]) continue;
            children.push_back({nbr, bidx});
        }
        for (std::size_t c = 0; c < children.size(); ++c) {
            auto [nbr, bidx] = children[c];
            std::string sub;
            if (!bond_is_default(g_, g_.bonds[bidx])) sub += bond_char(g_.bonds[bidx].order);
            emit(nbr, bidx, sub);
            if (c + 1 == children.size())
                out += sub;
            else
                out += "(" + sub + ")";
        }
    }

    int allocate_ring_number() {
        int num = 1;
        while (in_use_.count(num)) ++num;
        if (num > 99) throw std::runtime_error("write_smiles: too many open ring bonds");
        in_use_.insert(num);
        return num;
    }

    static std::string ring_digit(int num) {
        if (num < 10) return std::string(1, static_cast<char>('0' + num));
        return "%" + std::to_string(num);
    }

    const MolGraph& g_;
    std::vector<bool> visited_;
    std::vector<bool> is_tree_;
    std::vector<int> ring_num_;
    std::set<int> in_use_;
};

}  // namespace

MolGraph parse_smiles(const std::string& text) { return Parser(text).run(); }

std::string write_smiles(const MolGraph& g) {
    if (g.num_atoms() == 0) return "";
    return Writer(g).run();
}

MolGraph ReactionRecord::merged_reactants() const { return merge_graphs(reactants); }

std::vector<std::pair<int, int>> ReactionRecord::atom_map_pairs() const {
    std::map<int, int> reactant_pos;  // map number -> merged reactant index
    int base = 0;
    for (const MolGraph& frag : reactants) {
        for (int i = 0; i < frag.num_atoms(); ++i) {
            if (frag.atoms[i].map_number > 0) reactant_pos[frag.atoms[i].map_number] = base + i;
        }
        base += frag.num_atoms();
    }
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < product.num_atoms(); ++i) {
        int m = product.atoms[i].map_number;
        if (m == 0) continue;
        auto it = reactant_pos.find(m);
        if (it != reactant_pos.end()) pairs.push_back({i, it->second});
    }
    return pairs;
}

ReactionRecord parse_reaction(const std::string& text) {
    std::size_t sep = text.find(">>");
    if (sep == std::string::npos)
        throw ParseError(ParseErrorKind::Syntax, 0, "missing '>>' separator");
    if (text.find(">>", sep + 2) != std::string::npos)
        throw ParseError(ParseErrorKind::Syntax, text.find(">>", sep + 2), "multiple '>>'");

    ReactionRecord rxn;
    MolGraph all_reactants = parse_smiles(text.substr(0, sep));
    try {
        rxn.product = parse_smiles(text.substr(sep + 2));
    } catch (const ParseError& e) {
        throw ParseError(e.kind, e.offset + sep + 2, e.message);
    }
    if (rxn.product.num_components() != 1)
        throw ParseError(ParseErrorKind::Syntax, sep + 2, "product must be one connected molecule");
    rxn.reactants = split_components(all_reactants);

    // Map numbers must be unique per side; every mapped product atom needs a
    // reactant partner of the same element (reactant-only maps are fine).
    std::map<int, std::string> reactant_maps;
    for (const Atom& a : all_reactants.atoms) {
        if (a.map_number == 0) continue;
        if (reactant_maps.count(a.map_number))
            throw ParseError(ParseErrorKind::Syntax, 0,
                             "duplicate reactant map " + std::to_string(a.map_number));
        reactant_maps[a.map_number] = a.symbol;
    }
    std::set<int> product_maps;
    for (Atom& a : rxn.product.atoms) {
        if (a.map_number == 0) continue;
        if (!product_maps.insert(a.map_number).second)
            throw ParseError(ParseErrorKind::Syntax, sep + 2,
                             "duplicate product map " + std::to_string(a.map_number));
        auto it = reactant_maps.find(a.map_number);
        if (it == reactant_maps.end())
            throw ParseError(ParseErrorKind::Syntax, sep + 2,
                             "product map " + std::to_string(a.map_number) +
                                 " has no reactant partner");
        // A number pairing two different elements carries no atom identity;
        // the product atom is demoted to unmapped (its partner keeps the map,
        // which then just marks a retrosynthetically lost reactant atom).
        if (it->second != a.symbol) a.map_number = 0;
    }
    return rxn;
}

std::string write_reaction(const ReactionRecord& rxn) {
    std::string out;
    for (std::size_t i = 0; i < rxn.reactants.size(); ++i) {
        if (i) out += ".";
        out += write_smiles(rxn.reactants[i]);
    }
    out += ">>";
    out += write_smiles(rxn.product);
    return out;
}

}  // namespace retroflow
