#pragma once

#include <functional>
#include <string>

namespace pluralfill {

/// Warnings go to stderr unless a sink is installed. Pass nullptr to restore.
void set_warning_sink(std::function<void(const std::string&)> sink);
void warn(const std::string& message);

}  // namespace pluralfill
