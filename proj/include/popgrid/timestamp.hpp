#pragma once

#include <chrono>
#include <string>
#include <string_view>

namespace popgrid {

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

/// "YYYY-MM-DDTHH:MM:SS.mmmZ"
std::string format_timestamp(Timestamp t);

/// Accepts "YYYY-MM-DDTHH:MM:SS[.fff]Z" (UTC only).
Timestamp parse_timestamp(std::string_view text);

Timestamp now_utc();

/// Validates a "YYYY-MM-DD" calendar date.
bool is_calendar_date(std::string_view text);

}  // namespace popgrid
