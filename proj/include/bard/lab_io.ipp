#pragma once

#include <fstream>
#include <stdexcept>

namespace bard::lab {

template <class T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items) {
  std::string text;
  for (const auto& item : items) text += nlohmann::json(item).dump() + "\n";
  write_text(path, text);
}

template <class T>
std::vector<T> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<T>());
  return out;
}

}  // namespace bard::lab
