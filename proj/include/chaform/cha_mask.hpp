#pragma once

// Stack-structured causal attention masks. Every target token either EXPANDS the
// current stack (it sees the whole stack plus itself and is pushed) or
// COMPOSES a finished span (it sees only that span and replaces it on the
// stack). Which tokens compose depends on the form kind:
//
//   SingleDown : ')' composes back to the matching '('
//   DoubleDown : ')1' composes, ')2' is an ordinary expand token
//   BottomUp   : the reduce token composes the span named by struct_ptr
//
// Masks are lower-triangular by construction: visible(i,j) => j <= i.

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "chaform/target_form.hpp"

namespace chaform {

struct MaskError : std::runtime_error {
  std::size_t index;
  MaskError(const std::string& msg, std::size_t idx)
      : std::runtime_error(msg + " (at token " + std::to_string(idx) + ")"), index(idx) {}
};

struct ChaMask {
  int n = 0;
  std::vector<std::uint8_t> cells;  // row-major n*n

  explicit ChaMask(int size = 0) : n(size), cells(static_cast<std::size_t>(size) * size, 0) {}
  bool visible(int i, int j) const { return cells[static_cast<std::size_t>(i) * n + j] != 0; }
  void set(int i, int j) { cells[static_cast<std::size_t>(i) * n + j] = 1; }

  std::vector<int> row(int i) const {
    std::vector<int> out;
    for (int j = 0; j < n; ++j)
      if (visible(i, j)) out.push_back(j);
    return out;
  }

  bool operator==(const ChaMask&) const = default;
};

// Ablation switches for the top-down mask (used by the mask-matters study):
//   ComposeAsExpand — compose rows see stack+self like expand rows, but the
//                     stack still evolves as usual.
//   ExpandAsCausal  — expand rows see the full causal prefix; compose rows
//                     keep their span-only visibility.
enum class MaskVariant { Standard, ComposeAsExpand, ExpandAsCausal };

inline std::string to_string(MaskVariant v) {
  switch (v) {
    case MaskVariant::Standard: return "standard";
    case MaskVariant::ComposeAsExpand: return "compose-as-expand";
    case MaskVariant::ExpandAsCausal: return "expand-as-causal";
  }
  return "?";
}

inline MaskVariant mask_variant_from_string(const std::string& s) {
  if (s == "standard") return MaskVariant::Standard;
  if (s == "compose-as-expand") return MaskVariant::ComposeAsExpand;
  if (s == "expand-as-causal") return MaskVariant::ExpandAsCausal;
  throw std::invalid_argument("unknown mask variant '" + s + "'");
}

// ---- whole-sequence builders (direct stack transcriptions) ----

inline ChaMask mask_single_down(const std::vector<Token>& tokens) {
  const int n = static_cast<int>(tokens.size());
  ChaMask m(n);
  std::vector<int> stack;
  for (int i = 0; i < n; ++i) {
    switch (tokens[i].type) {
      case TokenType::CloseCompose:
      case TokenType::CloseExpand:
      case TokenType::Reduce:
        throw MaskError("token not allowed in a single-close sequence", i);
      case TokenType::Close: {
        int j = i;
        m.set(i, j);
        while (tokens[j].type != TokenType::Open) {
          if (stack.empty()) throw MaskError("unbalanced sequence: close without open", i);
          j = stack.back();
          stack.pop_back();
          m.set(i, j);
        }
        stack.push_back(i);
        break;
      }
      default:
        stack.push_back(i);
        for (int j : stack) m.set(i, j);
        break;
    }
  }
  return m;
}

inline ChaMask mask_double_down(const std::vector<Token>& tokens) {
  const int n = static_cast<int>(tokens.size());
  ChaMask m(n);
  std::vector<int> stack;
  for (int i = 0; i < n; ++i) {
    switch (tokens[i].type) {
      case TokenType::Close:
      case TokenType::Reduce:
        throw MaskError("token not allowed in a double-close sequence", i);
      case TokenType::CloseCompose: {
        if (i + 1 >= n || tokens[i + 1].type != TokenType::CloseExpand)
          throw MaskError("compose-close not followed by expand-close", i);
        int j = i;
        m.set(i, j);
        while (tokens[j].type != TokenType::Open) {
          if (stack.empty()) throw MaskError("unbalanced sequence: close without open", i);
          j = stack.back();
          stack.pop_back();
          m.set(i, j);
        }
        stack.push_back(i);
        break;
      }
      case TokenType::CloseExpand:
        if (i == 0 || tokens[i - 1].type != TokenType::CloseCompose)
          throw MaskError("expand-close not preceded by compose-close", i);
        [[fallthrough]];
      default:
        stack.push_back(i);
        for (int j : stack) m.set(i, j);
        break;
    }
  }
  return m;
}

inline ChaMask mask_bottom_up(const std::vector<Token>& tokens, const std::vector<int>& struct_ptr) {
  const int n = static_cast<int>(tokens.size());
  if (static_cast<int>(struct_ptr.size()) != n)
    throw MaskError("struct pointer layer length mismatch", 0);
  ChaMask m(n);
  std::vector<int> stack;
  for (int i = 0; i < n; ++i) {
    if (tokens[i].type == TokenType::Open || tokens[i].type == TokenType::Close ||
        tokens[i].type == TokenType::CloseCompose || tokens[i].type == TokenType::CloseExpand)
      throw MaskError("token not allowed in a bottom-up sequence", i);
    if (tokens[i].type == TokenType::Reduce) {
      int s = struct_ptr[i];
      if (s < 0) throw MaskError("reduce token without a struct pointer", i);
      m.set(i, i);
      while (!stack.empty() && stack.back() > s) {
        m.set(i, stack.back());
        stack.pop_back();
      }
      if (stack.empty() || stack.back() != s)
        throw MaskError("struct pointer targets an already-composed index", i);
      m.set(i, s);
      stack.pop_back();
      stack.push_back(i);
    } else {
      if (struct_ptr[i] != -1)
        throw MaskError("struct pointer on a non-reduce token", i);
      stack.push_back(i);
      for (int j : stack) m.set(i, j);
    }
  }
  return m;
}

// Top-down mask with one action rewired (see MaskVariant).
inline ChaMask mask_single_down_ablated(const std::vector<Token>& tokens, MaskVariant variant) {
  if (variant == MaskVariant::Standard) return mask_single_down(tokens);
  const int n = static_cast<int>(tokens.size());
  ChaMask m(n);
  std::vector<int> stack;
  for (int i = 0; i < n; ++i) {
    switch (tokens[i].type) {
      case TokenType::CloseCompose:
      case TokenType::CloseExpand:
      case TokenType::Reduce:
        throw MaskError("token not allowed in a single-close sequence", i);
      case TokenType::Close: {
        if (variant == MaskVariant::ComposeAsExpand) {
          m.set(i, i);
          for (int j : stack) m.set(i, j);
        } else {
          int j0 = i;
          m.set(i, j0);
          // walk a copy so the real stack update below stays identical
          std::vector<int> tmp = stack;
          while (tokens[j0].type != TokenType::Open) {
            if (tmp.empty()) throw MaskError("unbalanced sequence: close without open", i);
            j0 = tmp.back();
            tmp.pop_back();
            m.set(i, j0);
          }
        }
        // stack evolves exactly as in the standard mask
        int j = i;
        while (tokens[j].type != TokenType::Open) {
          if (stack.empty()) throw MaskError("unbalanced sequence: close without open", i);
          j = stack.back();
          stack.pop_back();
        }
        stack.push_back(i);
        break;
      }
      default:
        if (variant == MaskVariant::ExpandAsCausal) {
          for (int j = 0; j <= i; ++j) m.set(i, j);
        } else {
          m.set(i, i);
          for (int j : stack) m.set(i, j);
        }
        stack.push_back(i);
        break;
    }
  }
  return m;
}

// ---- one-token-at-a-time construction (used by constrained decoding) ----

struct StackState {
  FormKind kind = FormKind::SingleDown;
  MaskVariant variant = MaskVariant::Standard;
  std::vector<int> stack;
  std::vector<TokenType> types;  // type of every token processed so far
  int length = 0;
};

// Feeds one token; returns the visible columns of the new row (ascending) and
// advances the state. Exactly reproduces row `length` of the batch builders.
inline std::vector<int> incremental_step(StackState& st, const Token& tok, int struct_ptr = -1) {
  const int i = st.length;
  std::vector<int> row;
  auto expand = [&] {
    if (st.variant == MaskVariant::ExpandAsCausal && st.kind == FormKind::SingleDown) {
      for (int j = 0; j <= i; ++j) row.push_back(j);
    } else {
      row = st.stack;
      row.push_back(i);
    }
    st.stack.push_back(i);
  };
  auto compose_topdown = [&] {
    if (st.variant == MaskVariant::ComposeAsExpand && st.kind == FormKind::SingleDown) {
      row = st.stack;
      row.push_back(i);
    }
    // pop up to and including the matching open; the close itself is never
    // an open, so pop at least once
    std::vector<int> span{i};
    int j;
    do {
      if (st.stack.empty()) throw MaskError("unbalanced sequence: close without open", i);
      j = st.stack.back();
      st.stack.pop_back();
      span.push_back(j);
    } while (st.types[static_cast<std::size_t>(j)] != TokenType::Open);
    if (st.variant != MaskVariant::ComposeAsExpand || st.kind != FormKind::SingleDown) row = span;
    st.stack.push_back(i);
  };

  switch (tok.type) {
    case TokenType::Close:
      if (st.kind != FormKind::SingleDown)
        throw MaskError("token not allowed for this form kind", i);
      compose_topdown();
      break;
    case TokenType::CloseCompose:
      if (st.kind != FormKind::DoubleDown)
        throw MaskError("token not allowed for this form kind", i);
      compose_topdown();
      break;
    case TokenType::CloseExpand:
      if (st.kind != FormKind::DoubleDown)
        throw MaskError("token not allowed for this form kind", i);
      expand();
      break;
    case TokenType::Reduce: {
      if (st.kind != FormKind::BottomUp)
        throw MaskError("token not allowed for this form kind", i);
      if (struct_ptr < 0) throw MaskError("reduce token without a struct pointer", i);
      row.push_back(i);
      while (!st.stack.empty() && st.stack.back() > struct_ptr) {
        row.push_back(st.stack.back());
        st.stack.pop_back();
      }
      if (st.stack.empty() || st.stack.back() != struct_ptr)
        throw MaskError("struct pointer targets an already-composed index", i);
      row.push_back(struct_ptr);
      st.stack.pop_back();
      st.stack.push_back(i);
      break;
    }
    case TokenType::Open:
      if (st.kind == FormKind::BottomUp)
        throw MaskError("token not allowed for this form kind", i);
      expand();
      break;
    default:
      expand();
      break;
  }
  st.types.push_back(tok.type);
  ++st.length;
  std::sort(row.begin(), row.end());
  row.erase(std::unique(row.begin(), row.end()), row.end());
  return row;
}

// Whole mask for a validated form through the matching builder.
inline ChaMask build_mask(const TargetForm& f, MaskVariant variant = MaskVariant::Standard) {
  switch (f.kind) {
    case FormKind::SingleDown:
      return mask_single_down_ablated(f.tokens, variant);
    case FormKind::DoubleDown:
      if (variant != MaskVariant::Standard)
        throw MaskError("mask ablations are defined for the single-close kind", 0);
      return mask_double_down(f.tokens);
    case FormKind::BottomUp:
      if (variant != MaskVariant::Standard)
        throw MaskError("mask ablations are defined for the single-close kind", 0);
      return mask_bottom_up(f.tokens, f.struct_ptr);
  }
  throw MaskError("unknown form kind", 0);
}

// ---- rendering ----

inline std::string ascii_grid(const ChaMask& m) {
  std::string out;
  out.reserve(static_cast<std::size_t>(m.n) * (m.n + 1));
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j < m.n; ++j) out += m.visible(i, j) ? '#' : '.';
    out += '\n';
  }
  return out;
}

// Plain (P2) PGM, visible cells black on white.
inline void write_pgm(const ChaMask& m, std::ostream& out) {
  out << "P2\n" << m.n << ' ' << m.n << "\n255\n";
  for (int i = 0; i < m.n; ++i) {
    for (int j = 0; j < m.n; ++j) {
      if (j) out << ' ';
      out << (m.visible(i, j) ? 0 : 255);
    }
    out << '\n';
  }
}

}  // namespace chaform
