// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "layerfuse/analysis.hpp"
#include "layerfuse/embedding_io.hpp"
#include "layerfuse/error.hpp"
#include "layerfuse/eval.hpp"
#include "layerfuse/fusion.hpp"
#include "layerfuse/ingest.hpp"
#include "layerfuse/linalg.hpp"
#include "layerfuse/parallel.hpp"
