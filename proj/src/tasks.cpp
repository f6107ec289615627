// SPDX-License-Identifier: Apache-2.0
#include "treerpo/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>

#include "treerpo/rng.hpp"

namespace treerpo {

namespace {
constexpr const char* kChars = "0123456789abcdef+-*/()_=|#";
}

const Vocabulary& char_vocabulary() {
  static const Vocabulary vocab = [] {
    Vocabulary v;
    v.tokens.push_back("[MASK]");
    v.tokens.push_back("[PAD]");
    for (const char* c = kChars; *c; ++c) v.tokens.push_back(std::string(1, *c));
    v.mask_id = 0;
    v.pad_id = 1;
    v.validate();
    return v;
  }();
  return vocab;
}

std::vector<int> encode_chars(const std::string& text) {
  const Vocabulary& v = char_vocabulary();
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    int id = v.id_of(std::string(1, c));
    if (id < 0) throw InvalidCallError(std::string("character not in vocabulary: ") + c);
    out.push_back(id);
  }
  return out;
}

std::string decode_chars(const std::vector<int>& tokens) {
  const Vocabulary& v = char_vocabulary();
  std::string out;
  for (int t : tokens) {
    if (t == kMaskedSlot) {
      out += '?';
    } else if (t >= 0 && t < v.size() && v.tokens[t].size() == 1) {
      out += v.tokens[t];
    } else {
      out += '?';
    }
  }
  return out;
}

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Sort: return "sort";
    case TaskKind::Sudoku4: return "sudoku4";
    case TaskKind::Countdown: return "countdown";
  }
  return "?";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "sort") return TaskKind::Sort;
  if (name == "sudoku4") return TaskKind::Sudoku4;
  if (name == "countdown") return TaskKind::Countdown;
  throw ConfigError("unknown task: " + name);
}

TaskSpec TaskSpec::make(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  switch (kind) {
    case TaskKind::Copy:
    case TaskKind::Sort:
      s.completion_len = 16;
      s.denoise_steps = 8;
      s.block_len = 8;
      s.payload_len = 16;
      break;
    case TaskKind::Sudoku4:
      s.completion_len = 16;
      s.denoise_steps = 8;
      s.block_len = 8;
      break;
    case TaskKind::Countdown:
      s.completion_len = 12;
      s.denoise_steps = 6;
      s.block_len = 6;
      break;
  }
  return s;
}

void TaskSpec::validate() const {
  if (completion_len <= 0 || denoise_steps <= 0 || block_len <= 0)
    throw ConfigError("task L/N/b must be positive");
  if (completion_len % block_len != 0)
    throw ConfigError("task block length must divide completion length");
  if (completion_len % denoise_steps != 0)
    throw ConfigError("task denoise steps must divide completion length");
  switch (kind) {
    case TaskKind::Copy:
    case TaskKind::Sort:
      if (payload_len < 1 || payload_len > completion_len)
        throw ConfigError("payload length must fit in the completion");
      if (alphabet_size < 2 || alphabet_size > 6)
        throw ConfigError("alphabet size must be 2..6");
      break;
    case TaskKind::Sudoku4:
      if (sudoku_givens < 4 || sudoku_givens > 16)
        throw ConfigError("sudoku givens must be 4..16");
      if (completion_len != 16) throw ConfigError("sudoku completion length is 16");
      break;
    case TaskKind::Countdown:
      if (countdown_operands < 2 || countdown_operands > 4)
        throw ConfigError("countdown operand count must be 2..4");
      if (countdown_max_number < 1 || countdown_max_number > 9)
        throw ConfigError("countdown numbers must be single digits");
      break;
  }
}

std::vector<int> TaskSpec::allowed_tokens() const {
  std::vector<std::string> chars;
  switch (kind) {
    case TaskKind::Copy:
    case TaskKind::Sort:
      for (int i = 0; i < alphabet_size; ++i) chars.push_back(std::string(1, 'a' + i));
      if (payload_len < completion_len) chars.push_back("#");
      break;
    case TaskKind::Sudoku4:
      for (char c : {'1', '2', '3', '4'}) chars.push_back(std::string(1, c));
      break;
    case TaskKind::Countdown:
      for (char c = '0'; c <= '9'; ++c) chars.push_back(std::string(1, c));
      for (char c : {'+', '-', '*', '/', '(', ')', '#'}) chars.push_back(std::string(1, c));
      break;
  }
  std::vector<int> ids;
  for (const std::string& c : chars) ids.push_back(char_vocabulary().id_of(c));
  return ids;
}

// --- copy / sort ------------------------------------------------------------

double verify_copy(const std::vector<int>& completion, const std::vector<int>& target) {
  if (target.empty()) return 0.0;
  int match = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (i < completion.size() && completion[i] == target[i]) ++match;
  return static_cast<double>(match) / static_cast<double>(target.size());
}

double verify_sort(const std::vector<int>& completion, const std::vector<int>& target) {
  return verify_copy(completion, target);
}

// --- sudoku ------------------------------------------------------------------

namespace {

int box_of(int cell) { return (cell / 8) * 2 + (cell % 4) / 2; }

bool sudoku4_valid_placement(const std::array<int, 16>& g, int cell, int digit) {
  int row = cell / 4, col = cell % 4, box = box_of(cell);
  for (int i = 0; i < 16; ++i) {
    if (i == cell || g[i] != digit) continue;
    if (i / 4 == row || i % 4 == col || box_of(i) == box) return false;
  }
  return true;
}

int count_solutions_impl(std::array<int, 16>& g, int limit) {
  int cell = -1;
  for (int i = 0; i < 16; ++i)
    if (g[i] == 0) {
      cell = i;
      break;
    }
  if (cell < 0) return 1;
  int found = 0;
  for (int d = 1; d <= 4; ++d) {
    if (!sudoku4_valid_placement(g, cell, d)) continue;
    g[cell] = d;
    found += count_solutions_impl(g, limit - found);
    g[cell] = 0;
    if (found >= limit) break;
  }
  return found;
}

std::array<int, 16> random_solved_grid(std::mt19937_64& rng) {
  std::array<int, 16> g{};
  std::array<std::array<int, 4>, 16> digit_order;
  for (auto& row : digit_order) {
    row = {1, 2, 3, 4};
    for (int i = 3; i > 0; --i) std::swap(row[i], row[uniform_int(rng, i + 1)]);
  }
  // backtracking fill with per-cell shuffled digit order
  std::array<int, 16> at{};
  int cell = 0;
  while (cell >= 0 && cell < 16) {
    bool placed = false;
    while (at[cell] < 4) {
      int d = digit_order[cell][at[cell]++];
      if (sudoku4_valid_placement(g, cell, d)) {
        g[cell] = d;
        placed = true;
        break;
      }
    }
    if (placed) {
      ++cell;
    } else {
      g[cell] = 0;
      at[cell] = 0;
      --cell;
      if (cell >= 0) g[cell] = 0;
    }
  }
  return g;
}

}  // namespace

int sudoku4_count_solutions(const std::array<int, 16>& grid, int limit) {
  std::array<int, 16> g = grid;
  return count_solutions_impl(g, limit);
}

double verify_sudoku4(const std::vector<int>& completion,
                      const std::array<int, 16>& givens, bool binary) {
  const Vocabulary& v = char_vocabulary();
  std::array<int, 16> grid{};
  bool parseable = completion.size() >= 16;
  for (int i = 0; parseable && i < 16; ++i) {
    int tok = completion[i];
    if (tok < 0 || tok >= v.size() || v.tokens[tok].size() != 1) {
      parseable = false;
      break;
    }
    char c = v.tokens[tok][0];
    if (c < '1' || c > '4') {
      parseable = false;
      break;
    }
    grid[i] = c - '0';
  }
  if (!parseable) return 0.0;

  bool ok = true;
  for (int i = 0; i < 16 && ok; ++i)
    if (givens[i] != 0 && grid[i] != givens[i]) ok = false;
  for (int i = 0; i < 16 && ok; ++i)
    if (!sudoku4_valid_placement(grid, i, grid[i])) ok = false;
  if (ok) return 1.0;
  return binary ? 0.0 : 0.1;
}

// --- countdown ----------------------------------------------------------------

namespace {

struct Rational {
  long long num = 0, den = 1;
  bool valid = true;
};

Rational rat_op(const Rational& a, const Rational& b, char op) {
  Rational r;
  if (!a.valid || !b.valid) {
    r.valid = false;
    return r;
  }
  switch (op) {
    case '+': r.num = a.num * b.den + b.num * a.den; r.den = a.den * b.den; break;
    case '-': r.num = a.num * b.den - b.num * a.den; r.den = a.den * b.den; break;
    case '*': r.num = a.num * b.num; r.den = a.den * b.den; break;
    case '/':
      if (b.num == 0) {
        r.valid = false;
        return r;
      }
      r.num = a.num * b.den;
      r.den = a.den * b.num;
      break;
    default: r.valid = false; return r;
  }
  if (r.den < 0) {
    r.den = -r.den;
    r.num = -r.num;
  }
  long long g = std::gcd(std::abs(r.num), r.den);
  if (g > 1) {
    r.num /= g;
    r.den /= g;
  }
  if (std::abs(r.num) > 1000000000000LL || r.den > 1000000000000LL) r.valid = false;
  return r;
}

struct ExprParser {
  const std::string& s;
  std::size_t at = 0;
  std::vector<long long> leaves;
  bool ok = true;

  explicit ExprParser(const std::string& text) : s(text) {}

  bool done() const { return at >= s.size(); }
  char peek() const { return done() ? '\0' : s[at]; }

  Rational parse_expr() {
    Rational v = parse_term();
    while (ok && (peek() == '+' || peek() == '-')) {
      char op = s[at++];
      v = rat_op(v, parse_term(), op);
    }
    return v;
  }

  Rational parse_term() {
    Rational v = parse_factor();
    while (ok && (peek() == '*' || peek() == '/')) {
      char op = s[at++];
      v = rat_op(v, parse_factor(), op);
    }
    return v;
  }

  Rational parse_factor() {
    if (peek() == '(') {
      ++at;
      Rational v = parse_expr();
      if (peek() != ')') {
        ok = false;
        return {};
      }
      ++at;
      return v;
    }
    if (!std::isdigit(static_cast<unsigned char>(peek()))) {
      ok = false;
      return {};
    }
    long long n = 0;
    while (std::isdigit(static_cast<unsigned char>(peek()))) {
      n = n * 10 + (s[at++] - '0');
      if (n > 1000000) {
        ok = false;
        return {};
      }
    }
    leaves.push_back(n);
    return Rational{n, 1, true};
  }
};

std::string completion_to_expr(const std::vector<int>& completion) {
  const Vocabulary& v = char_vocabulary();
  std::string s;
  for (int tok : completion) {
    if (tok < 0 || tok >= v.size() || v.tokens[tok].size() != 1) return {};
    s += v.tokens[tok][0];
  }
  while (!s.empty() && s.back() == '#') s.pop_back();
  return s;
}

}  // namespace

double verify_countdown(const std::vector<int>& completion,
                        const std::vector<int>& numbers, long long target) {
  std::string expr = completion_to_expr(completion);
  if (expr.empty()) return 0.0;
  for (char c : expr)
    if (!std::isdigit(static_cast<unsigned char>(c)) && !std::strchr("+-*/()", c))
      return 0.0;
  ExprParser parser(expr);
  Rational value = parser.parse_expr();
  if (!parser.ok || !parser.done()) return 0.0;

  // parseable from here on; full credit needs exact usage and value
  if (!value.valid) return 0.1;
  std::vector<long long> used = parser.leaves;
  std::vector<long long> want(numbers.begin(), numbers.end());
  std::sort(used.begin(), used.end());
  std::sort(want.begin(), want.end());
  if (used != want) return 0.1;
  if (value.den != 1 || value.num != target) return 0.1;
  return 1.0;
}

// --- instance generation ---------------------------------------------------

namespace {

TaskInstance make_copy_like(const TaskSpec& spec, std::mt19937_64& rng, bool sorted) {
  TaskInstance inst;
  std::string payload;
  for (int i = 0; i < spec.payload_len; ++i)
    payload += static_cast<char>('a' + uniform_int(rng, spec.alphabet_size));
  std::string answer = payload;
  if (sorted) std::sort(answer.begin(), answer.end());

  std::string completion = answer;
  completion.append(spec.completion_len - spec.payload_len, '#');
  inst.prompt_tokens = encode_chars(payload + "|");
  inst.solution_tokens = encode_chars(completion);
  std::vector<int> target = encode_chars(answer);
  inst.verifier = [target](const std::vector<int>& c) { return verify_copy(c, target); };
  inst.metadata["payload"] = payload;
  inst.metadata["answer"] = answer;
  return inst;
}

TaskInstance make_sudoku(const TaskSpec& spec, std::mt19937_64& rng) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    std::array<int, 16> solution = random_solved_grid(rng);
    std::array<int, 16> givens = solution;
    std::vector<int> cells(16);
    std::iota(cells.begin(), cells.end(), 0);
    for (int i = 15; i > 0; --i) std::swap(cells[i], cells[uniform_int(rng, i + 1)]);
    int remaining = 16;
    for (int cell : cells) {
      if (remaining <= spec.sudoku_givens) break;
      int saved = givens[cell];
      givens[cell] = 0;
      if (sudoku4_count_solutions(givens, 2) == 1) {
        --remaining;
      } else {
        givens[cell] = saved;
      }
    }
    if (remaining != spec.sudoku_givens) continue;

    TaskInstance inst;
    std::string prompt;
    for (int i = 0; i < 16; ++i)
      prompt += givens[i] == 0 ? '_' : static_cast<char>('0' + givens[i]);
    std::string sol;
    for (int d : solution) sol += static_cast<char>('0' + d);
    inst.prompt_tokens = encode_chars(prompt + "|");
    inst.solution_tokens = encode_chars(sol);
    bool binary = spec.binary_reward;
    inst.verifier = [givens, binary](const std::vector<int>& c) {
      return verify_sudoku4(c, givens, binary);
    };
    inst.metadata["givens"] = prompt;
    inst.metadata["solution"] = sol;
    return inst;
  }
  throw InvalidCallError("could not reach the requested sudoku givens count");
}

// Random expression over the numbers; returns nullopt when a division fails
// or the value leaves the accepted target range.
std::optional<std::pair<std::string, long long>> build_expression(
    const std::vector<int>& numbers, std::mt19937_64& rng) {
  struct Part {
    std::string text;
    Rational value;
    bool atom = true;
  };
  std::vector<Part> parts;
  for (int n : numbers)
    parts.push_back({std::to_string(n), Rational{n, 1, true}, true});
  const char ops[4] = {'+', '-', '*', '/'};
  while (parts.size() > 1) {
    int i = uniform_int(rng, static_cast<int>(parts.size()));
    int j = uniform_int(rng, static_cast<int>(parts.size()) - 1);
    if (j >= i) ++j;
    char op = ops[uniform_int(rng, 4)];
    Rational v = rat_op(parts[i].value, parts[j].value, op);
    if (!v.valid) return std::nullopt;
    std::string lhs = parts[i].atom ? parts[i].text : "(" + parts[i].text + ")";
    std::string rhs = parts[j].atom ? parts[j].text : "(" + parts[j].text + ")";
    Part merged{lhs + op + rhs, v, false};
    parts.erase(parts.begin() + std::max(i, j));
    parts.erase(parts.begin() + std::min(i, j));
    parts.push_back(std::move(merged));
  }
  const Rational& v = parts[0].value;
  if (v.den != 1 || v.num < 1 || v.num > 99) return std::nullopt;
  return std::make_pair(parts[0].text, v.num);
}

TaskInstance make_countdown(const TaskSpec& spec, std::mt19937_64& rng) {
  while (true) {
    std::vector<int> numbers;
    for (int i = 0; i < spec.countdown_operands; ++i)
      numbers.push_back(1 + uniform_int(rng, spec.countdown_max_number));
    auto expr = build_expression(numbers, rng);
    if (!expr) continue;
    if (static_cast<int>(expr->first.size()) > spec.completion_len) continue;

    TaskInstance inst;
    std::string prompt;
    for (std::size_t i = 0; i < numbers.size(); ++i) {
      if (i) prompt += '|';
      prompt += std::to_string(numbers[i]);
    }
    prompt += "=" + std::to_string(expr->second);
    std::string completion = expr->first;
    completion.append(spec.completion_len - expr->first.size(), '#');
    inst.prompt_tokens = encode_chars(prompt);
    inst.solution_tokens = encode_chars(completion);
    long long target = expr->second;
    inst.verifier = [numbers, target](const std::vector<int>& c) {
      return verify_countdown(c, numbers, target);
    };
    inst.metadata["numbers"] = numbers;
    inst.metadata["target"] = target;
    inst.metadata["expression"] = expr->first;
    return inst;
  }
}

}  // namespace

TaskInstance sample_instance(const TaskSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  TaskInstance inst;
  switch (spec.kind) {
    case TaskKind::Copy: inst = make_copy_like(spec, rng, false); break;
    case TaskKind::Sort: inst = make_copy_like(spec, rng, true); break;
    case TaskKind::Sudoku4: inst = make_sudoku(spec, rng); break;
    case TaskKind::Countdown: inst = make_countdown(spec, rng); break;
  }
  if (static_cast<int>(inst.solution_tokens.size()) != spec.completion_len)
    throw ContractError("generated solution does not fill the completion length");
  if (inst.verifier(inst.solution_tokens) != 1.0)
    throw ContractError("generated instance rejects its own solution");
  return inst;
}

std::string dump_instance(const TaskSpec& spec, const TaskInstance& inst) {
  nlohmann::json rec{{"kind", task_name(spec.kind)},
                     {"prompt", decode_chars(inst.prompt_tokens)},
                     {"solution", decode_chars(inst.solution_tokens)},
                     {"metadata", inst.metadata},
                     {"seed", inst.seed},
                     {"L", spec.completion_len},
                     {"N", spec.denoise_steps},
                     {"b", spec.block_len}};
  return rec.dump();
}

TaskInstance load_instance(const std::string& line, TaskSpec* spec_out) {
  nlohmann::json rec = nlohmann::json::parse(line);
  TaskSpec spec = TaskSpec::make(task_from_name(rec.at("kind").get<std::string>()));
  spec.completion_len = rec.at("L").get<int>();
  spec.denoise_steps = rec.at("N").get<int>();
  spec.block_len = rec.at("b").get<int>();

  TaskInstance inst;
  inst.prompt_tokens = encode_chars(rec.at("prompt").get<std::string>());
  inst.solution_tokens = encode_chars(rec.at("solution").get<std::string>());
  inst.metadata = rec.at("metadata");
  inst.seed = rec.at("seed").get<std::uint64_t>();

  switch (spec.kind) {
    case TaskKind::Copy:
    case TaskKind::Sort: {
      std::vector<int> target = encode_chars(inst.metadata.at("answer").get<std::string>());
      inst.verifier = [target](const std::vector<int>& c) { return verify_copy(c, target); };
      break;
    }
    case TaskKind::Sudoku4: {
      std::string giv = inst.metadata.at("givens").get<std::string>();
      std::array<int, 16> givens{};
      for (int i = 0; i < 16; ++i) givens[i] = giv[i] == '_' ? 0 : giv[i] - '0';
      inst.verifier = [givens](const std::vector<int>& c) {
        return verify_sudoku4(c, givens, false);
      };
      break;
    }
    case TaskKind::Countdown: {
      std::vector<int> numbers = inst.metadata.at("numbers").get<std::vector<int>>();
      long long target = inst.metadata.at("target").get<long long>();
      inst.verifier = [numbers, target](const std::vector<int>& c) {
        return verify_countdown(c, numbers, target);
      };
      break;
    }
  }
  if (spec_out) *spec_out = spec;
  return inst;
}

}  // namespace treerpo
