#pragma once

#include <functional>
#include <string>

namespace restnet {

using WarningSink = std::function<void(const std::string&)>;

// Installs a process-wide warning handler; an empty sink restores the
// default (stderr). Returns the previous sink.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace restnet
