// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moelpr/checkpoint.hpp"
#include "moelpr/data.hpp"
#include "moelpr/errors.hpp"
#include "moelpr/experiment.hpp"
#include "moelpr/gradcheck.hpp"
#include "moelpr/graph.hpp"
#include "moelpr/hash.hpp"
#include "moelpr/losses.hpp"
#include "moelpr/model.hpp"
#include "moelpr/optimizer.hpp"
#include "moelpr/synth.hpp"
#include "moelpr/tensor.hpp"
#include "moelpr/trainer.hpp"
#include "moelpr/upcycle.hpp"
#include "moelpr/version.hpp"
