// SPDX-License-Identifier: Apache-2.0
#pragma once

// Everything in one include.

#include "cpfm/adam.hpp"
#include "cpfm/adaptation.hpp"
#include "cpfm/checkpoint.hpp"
#include "cpfm/dataset.hpp"
#include "cpfm/encoder.hpp"
#include "cpfm/grad_check.hpp"
#include "cpfm/harness.hpp"
#include "cpfm/metrics.hpp"
#include "cpfm/multi_source.hpp"
#include "cpfm/pseudo_labels.hpp"
#include "cpfm/source_model.hpp"
#include "cpfm/teacher.hpp"
#include "cpfm/teacher_service.hpp"
#include "cpfm/tensor.hpp"
