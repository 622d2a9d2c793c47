// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "cpcseg/boundary.hpp"
#include "cpcseg/config.hpp"
#include "cpcseg/data.hpp"
#include "cpcseg/errors.hpp"
#include "cpcseg/gradcheck.hpp"
#include "cpcseg/instrumentation.hpp"
#include "cpcseg/metrics.hpp"
#include "cpcseg/model.hpp"
#include "cpcseg/objective.hpp"
#include "cpcseg/ops.hpp"
#include "cpcseg/pipeline.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"
#include "cpcseg/trainer.hpp"
