/*
 * Copyright (c) 2025 The groupquant Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "groupquant/errors.hpp"
#include "groupquant/gptq.hpp"
#include "groupquant/manifest.hpp"
#include "groupquant/oracle.hpp"
#include "groupquant/parallel.hpp"
#include "groupquant/pipeline.hpp"
#include "groupquant/quantizer.hpp"
#include "groupquant/rng.hpp"
#include "groupquant/scale_init.hpp"
#include "groupquant/scale_refine.hpp"
#include "groupquant/statistics.hpp"
#include "groupquant/synthetic.hpp"
#include "groupquant/tensor.hpp"
