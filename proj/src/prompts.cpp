#include "obs/prompts.hpp"

#include <algorithm>

#include "obs/error.hpp"

namespace obs {

namespace detail {
const std::map<std::string, std::string, std::less<>>& template_sources();
}

namespace {

bool is_slot_char(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }

/// Calls `fn(start, end, name)` for every placeholder in `body`.
template <typename Fn>
void scan_placeholders(std::string_view id, std::string_view body, Fn&& fn) {
  std::size_t pos = 0;
  while ((pos = body.find("{{", pos)) != std::string_view::npos) {
    const auto close = body.find("}}", pos + 2);
    if (close == std::string_view::npos) {
      throw Error(ErrorCode::TemplateError, "unterminated placeholder in " + std::string(id), pos);
    }
    const auto name = body.substr(pos + 2, close - pos - 2);
    if (name.empty() || !std::all_of(name.begin(), name.end(), is_slot_char)) {
      throw Error(ErrorCode::TemplateError, "bad placeholder name in " + std::string(id), pos);
    }
    fn(pos, close + 2, name);
    pos = close + 2;
  }
}

}  // namespace

PromptTemplate::PromptTemplate(std::string template_id, std::string body)
    : id_(std::move(template_id)), body_(std::move(body)) {
  scan_placeholders(id_, body_, [&](std::size_t, std::size_t, std::string_view name) { slots_.emplace(name); });
}

std::string PromptTemplate::render(const SlotValues& values) const {
  for (const auto& [name, value] : values) {
    if (!slots_.contains(name)) throw Error(ErrorCode::TemplateError, id_ + " has no slot " + name);
  }
  std::string out;
  std::size_t copied = 0;
  scan_placeholders(id_, body_, [&](std::size_t start, std::size_t end, std::string_view name) {
    auto it = values.find(name);
    if (it == values.end()) throw Error(ErrorCode::TemplateError, id_ + ": slot " + std::string(name) + " unfilled", start);
    out.append(body_, copied, start - copied);
    out += it->second;
    copied = end;
  });
  out.append(body_, copied);
  return out;
}

const PromptTemplate& get_template(std::string_view template_id) {
  static const auto templates = [] {
    std::map<std::string, PromptTemplate, std::less<>> out;
    for (const auto& [id, text] : detail::template_sources()) {
      // Files end with a newline that is not part of the prompt.
      std::string body = text;
      if (!body.empty() && body.back() == '\n') body.pop_back();
      out.emplace(id, PromptTemplate(id, std::move(body)));
    }
    return out;
  }();
  auto it = templates.find(template_id);
  if (it == templates.end()) throw Error(ErrorCode::TemplateError, "unknown template " + std::string(template_id));
  return it->second;
}

std::vector<std::string> template_ids() {
  std::vector<std::string> out;
  for (const auto& [id, text] : detail::template_sources()) out.push_back(id);
  return out;
}

}  // namespace obs
