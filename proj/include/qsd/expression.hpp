#pragma once

// Small infix expression compiler used for `custom` model definitions.
//
// Grammar (usual precedence, `^` right-associative and binding tighter than
// unary minus, so -x^2 == -(x^2)):
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('+' | '-') unary | power
//   power   := primary ('^' unary)?
//   primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//
// Functions: exp, log, sqrt, pow(a, b), abs. Names resolve to the single
// free variable or to constants supplied at compile time (pi and e are
// always defined).

#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qsd/errors.hpp"

namespace qsd {

class Expression {
 public:
  static Expression compile(std::string_view source, std::string_view variable,
                            const std::map<std::string, double>& constants = {}) {
    Expression e;
    e.source_ = std::string(source);
    Parser p{source, variable, constants, e.program_};
    p.parse();
    e.max_depth_ = p.max_depth();
    if (e.max_depth_ > kStackSize) {
      throw ConfigError("model", "expression too deeply nested: " + e.source_);
    }
    return e;
  }

  double operator()(double v) const {
    std::array<double, kStackSize> stack{};
    std::size_t top = 0;
    for (const Instr& in : program_) {
      switch (in.op) {
        case Op::Const: stack[top++] = in.value; break;
        case Op::Var: stack[top++] = v; break;
        case Op::Neg: stack[top - 1] = -stack[top - 1]; break;
        case Op::Add: --top; stack[top - 1] += stack[top]; break;
        case Op::Sub: --top; stack[top - 1] -= stack[top]; break;
        case Op::Mul: --top; stack[top - 1] *= stack[top]; break;
        case Op::Div: --top; stack[top - 1] /= stack[top]; break;
        case Op::Pow: --top; stack[top - 1] = power(stack[top - 1], stack[top]); break;
        case Op::Exp: stack[top - 1] = std::exp(stack[top - 1]); break;
        case Op::Log: stack[top - 1] = std::log(stack[top - 1]); break;
        case Op::Sqrt: stack[top - 1] = std::sqrt(stack[top - 1]); break;
        case Op::Abs: stack[top - 1] = std::fabs(stack[top - 1]); break;
      }
    }
    return stack[0];
  }

  const std::string& source() const noexcept { return source_; }

 private:
  static constexpr std::size_t kStackSize = 64;

  enum class Op { Const, Var, Neg, Add, Sub, Mul, Div, Pow, Exp, Log, Sqrt, Abs };
  struct Instr {
    Op op;
    double value = 0.0;
  };

  // Integer exponents go through repeated multiplication so that negative
  // bases (e.g. (-x)^3) behave as expected.
  static double power(double base, double ex) {
    if (ex == std::round(ex) && std::fabs(ex) <= 64.0) {
      int n = static_cast<int>(ex);
      double r = 1.0;
      double b = n < 0 ? 1.0 / base : base;
      for (int k = 0; k < std::abs(n); ++k) r *= b;
      return r;
    }
    return std::pow(base, ex);
  }

  struct Parser {
    std::string_view src;
    std::string_view variable;
    const std::map<std::string, double>& constants;
    std::vector<Instr>& out;
    std::size_t pos = 0;
    std::size_t depth = 0;
    std::size_t max_depth_seen = 0;

    std::size_t max_depth() const { return max_depth_seen; }

    void parse() {
      expr();
      skip();
      if (pos != src.size()) fail("unexpected trailing input");
    }

    [[noreturn]] void fail(const std::string& msg) const {
      throw ConfigError("model", "expression '" + std::string(src) + "': " + msg +
                                     " at offset " + std::to_string(pos));
    }

    void skip() {
      while (pos < src.size() && std::isspace(static_cast<unsigned char>(src[pos]))) ++pos;
    }
    bool accept(char c) {
      skip();
      if (pos < src.size() && src[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }
    void emit(Op op, double v = 0.0) {
      out.push_back({op, v});
      switch (op) {
        case Op::Const:
        case Op::Var:
          ++depth;
          break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
        case Op::Pow:
          --depth;
          break;
        default:
          break;
      }
      if (depth > max_depth_seen) max_depth_seen = depth;
    }

    void expr() {
      term();
      for (;;) {
        if (accept('+')) {
          term();
          emit(Op::Add);
        } else if (accept('-')) {
          term();
          emit(Op::Sub);
        } else {
          return;
        }
      }
    }
    void term() {
      unary();
      for (;;) {
        if (accept('*')) {
          unary();
          emit(Op::Mul);
        } else if (accept('/')) {
          unary();
          emit(Op::Div);
        } else {
          return;
        }
      }
    }
    void unary() {
      if (accept('-')) {
        unary();
        emit(Op::Neg);
      } else if (accept('+')) {
        unary();
      } else {
        power_expr();
      }
    }
    void power_expr() {
      primary();
      if (accept('^')) {
        unary();
        emit(Op::Pow);
      }
    }
    void primary() {
      skip();
      if (pos >= src.size()) fail("unexpected end of input");
      char c = src[pos];
      if (accept('(')) {
        expr();
        if (!accept(')')) fail("expected ')'");
        return;
      }
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        number();
        return;
      }
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        std::size_t start = pos;
        while (pos < src.size() &&
               (std::isalnum(static_cast<unsigned char>(src[pos])) || src[pos] == '_')) {
          ++pos;
        }
        std::string name(src.substr(start, pos - start));
        if (accept('(')) {
          call(name);
          return;
        }
        if (name == variable) {
          emit(Op::Var);
        } else if (auto it = constants.find(name); it != constants.end()) {
          emit(Op::Const, it->second);
        } else if (name == "pi") {
          emit(Op::Const, std::numbers::pi);
        } else if (name == "e") {
          emit(Op::Const, std::numbers::e);
        } else {
          fail("unknown name '" + name + "'");
        }
        return;
      }
      fail(std::string("unexpected character '") + c + "'");
    }
    void number() {
      std::size_t start = pos;
      while (pos < src.size() &&
             (std::isdigit(static_cast<unsigned char>(src[pos])) || src[pos] == '.')) {
        ++pos;
      }
      if (pos < src.size() && (src[pos] == 'e' || src[pos] == 'E')) {
        std::size_t save = pos;
        ++pos;
        if (pos < src.size() && (src[pos] == '+' || src[pos] == '-')) ++pos;
        if (pos < src.size() && std::isdigit(static_cast<unsigned char>(src[pos]))) {
          while (pos < src.size() && std::isdigit(static_cast<unsigned char>(src[pos]))) ++pos;
        } else {
          pos = save;
        }
      }
      std::string text(src.substr(start, pos - start));
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(text, &used);
      } catch (const std::exception&) {
        fail("malformed number '" + text + "'");
      }
      if (used != text.size()) fail("malformed number '" + text + "'");
      emit(Op::Const, v);
    }
    void call(const std::string& name) {
      std::size_t nargs = 0;
      if (!accept(')')) {
        do {
          expr();
          ++nargs;
        } while (accept(','));
        if (!accept(')')) fail("expected ')' after arguments");
      }
      auto want = [&](std::size_t n) {
        if (nargs != n) fail(name + " expects " + std::to_string(n) + " argument(s)");
      };
      if (name == "exp") {
        want(1);
        emit(Op::Exp);
      } else if (name == "log") {
        want(1);
        emit(Op::Log);
      } else if (name == "sqrt") {
        want(1);
        emit(Op::Sqrt);
      } else if (name == "abs") {
        want(1);
        emit(Op::Abs);
      } else if (name == "pow") {
        want(2);
        emit(Op::Pow);
      } else {
        fail("unknown function '" + name + "'");
      }
    }
  };

  std::string source_;
  std::vector<Instr> program_;
  std::size_t max_depth_ = 0;
};

}  // namespace qsd
