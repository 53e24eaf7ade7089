#pragma once

#include "reactor/action.hpp"
#include "reactor/backend.hpp"
#include "reactor/dispatcher.hpp"
#include "reactor/engine.hpp"
#include "reactor/events.hpp"
#include "reactor/harness.hpp"
#include "reactor/http_backend.hpp"
#include "reactor/parser.hpp"
#include "reactor/registry.hpp"
#include "reactor/scratchpad.hpp"
#include "reactor/service.hpp"
#include "reactor/session.hpp"
#include "reactor/sse.hpp"
#include "reactor/text.hpp"
#include "reactor/value.hpp"
