#pragma once

#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcm/error.hpp"

namespace fcm {

struct Exemplar {
  std::string prompt;
  std::string answer;
  bool operator==(const Exemplar&) const = default;
};

// One evaluation instance: multiple choice (options + answer_index) or exact
// match (target).
struct Task {
  std::string prompt;
  std::vector<std::string> options;
  std::optional<std::size_t> answer_index;
  std::optional<std::string> target;
  std::vector<Exemplar> fewshot_pool;

  bool is_multiple_choice() const { return !options.empty(); }

  void validate() const {
    if (is_multiple_choice()) {
      if (!answer_index || *answer_index >= options.size()) {
        throw FormatError("task answer_index out of range for prompt '" + prompt + "'");
      }
    } else {
      if (!target) throw FormatError("task needs either options or a target");
      if (target->empty()) throw FormatError("empty target");
    }
  }

  bool operator==(const Task&) const = default;
};

inline nlohmann::json task_to_json(const Task& task) {
  nlohmann::json j;
  j["prompt"] = task.prompt;
  if (task.is_multiple_choice()) {
    j["options"] = task.options;
    j["answer_index"] = *task.answer_index;
  } else if (task.target) {
    j["target"] = *task.target;
  }
  if (!task.fewshot_pool.empty()) {
    auto& pool = j["fewshot_pool"] = nlohmann::json::array();
    for (const auto& ex : task.fewshot_pool) pool.push_back({{"prompt", ex.prompt}, {"answer", ex.answer}});
  }
  return j;
}

inline Task task_from_json(const nlohmann::json& j) {
  Task task;
  try {
    task.prompt = j.at("prompt").get<std::string>();
    if (j.contains("options")) {
      task.options = j.at("options").get<std::vector<std::string>>();
      task.answer_index = j.at("answer_index").get<std::size_t>();
    } else {
      task.target = j.at("target").get<std::string>();
    }
    if (j.contains("fewshot_pool")) {
      for (const auto& ex : j.at("fewshot_pool")) {
        task.fewshot_pool.push_back({ex.at("prompt").get<std::string>(), ex.at("answer").get<std::string>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed task record: ") + e.what());
  }
  task.validate();
  return task;
}

inline std::vector<Task> read_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open task file " + path);
  std::vector<Task> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    tasks.push_back(task_from_json(j));
  }
  return tasks;
}

inline void write_tasks(const std::string& path, const std::vector<Task>& tasks) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write task file " + path);
  for (const auto& t : tasks) out << task_to_json(t).dump() << '\n';
}

}  // namespace fcm
