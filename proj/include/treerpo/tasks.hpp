// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "treerpo/tree.hpp"
#include "treerpo/types.hpp"

#include <json.hpp>

namespace treerpo {

// Character-level vocabulary shared by every task: [MASK] [PAD] digits,
// letters a-f, arithmetic symbols, and a few separators (V = 28).
const Vocabulary& char_vocabulary();

std::vector<int> encode_chars(const std::string& text);
std::string decode_chars(const std::vector<int>& tokens);  // masked slots as '?'

enum class TaskKind { Copy, Sort, Sudoku4, Countdown };

const char* task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int completion_len = 16;  // L
  int denoise_steps = 8;    // N
  int block_len = 8;        // b

  // copy/sort knobs
  int payload_len = 16;
  int alphabet_size = 4;
  // sudoku knobs
  int sudoku_givens = 12;
  bool binary_reward = false;
  // countdown knobs
  int countdown_operands = 3;
  int countdown_max_number = 9;

  static TaskSpec make(TaskKind kind);
  void validate() const;
  // Tokens the sampler may emit for this task.
  std::vector<int> allowed_tokens() const;
};

struct TaskInstance {
  std::vector<int> prompt_tokens;
  Verifier verifier;                // pure and total over token sequences
  std::vector<int> solution_tokens; // one reward-1 completion (length L)
  nlohmann::json metadata;
  std::uint64_t seed = 0;
};

// Deterministic given the generator state; every instance admits a reward-1
// completion of length L (held in solution_tokens).
TaskInstance sample_instance(const TaskSpec& spec, std::mt19937_64& rng);

// --- standalone verifiers -------------------------------------------------

// 1 when all givens are preserved and every row/column/box is a permutation
// of 1-4; 0.1 for a parseable all-digit grid; 0 otherwise. binary drops the
// 0.1 tier.
double verify_sudoku4(const std::vector<int>& completion,
                      const std::array<int, 16>& givens, bool binary = false);

// 1 when the expression uses each given number exactly once and evaluates to
// the target; 0.1 for parseable arithmetic; 0 otherwise.
double verify_countdown(const std::vector<int>& completion,
                        const std::vector<int>& numbers, long long target);

// Fraction of answer positions matching the target sequence.
double verify_copy(const std::vector<int>& completion, const std::vector<int>& target);
double verify_sort(const std::vector<int>& completion, const std::vector<int>& target);

// --- fixture round-trip ----------------------------------------------------

std::string dump_instance(const TaskSpec& spec, const TaskInstance& inst);
TaskInstance load_instance(const std::string& line, TaskSpec* spec_out = nullptr);

// Solution count of a 4x4 grid with 0 = blank, counted up to `limit`.
int sudoku4_count_solutions(const std::array<int, 16>& grid, int limit = 2);

}  // namespace treerpo
