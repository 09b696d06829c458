#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace obs {

using SlotValues = std::map<std::string, std::string, std::less<>>;

/// Text with `{{slot}}` placeholders. Slot names are [a-z_]+.
class PromptTemplate {
public:
  PromptTemplate(std::string template_id, std::string body);

  const std::string& id() const { return id_; }
  const std::string& body() const { return body_; }
  const std::set<std::string, std::less<>>& slots() const { return slots_; }

  /// Single-pass substitution. Throws TemplateError when a slot has no value
  /// or a value is given for a slot the template does not have.
  std::string render(const SlotValues& values) const;

private:
  std::string id_;
  std::string body_;
  std::set<std::string, std::less<>> slots_;
};

/// Built-in templates compiled from templates/*.txt; the id is the file stem.
const PromptTemplate& get_template(std::string_view template_id);
std::vector<std::string> template_ids();

}  // namespace obs
