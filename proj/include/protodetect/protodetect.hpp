#pragma once

#include "protodetect/classifier.hpp"
#include "protodetect/core_types.hpp"
#include "protodetect/evaluator.hpp"
#include "protodetect/fixture.hpp"
#include "protodetect/geometry.hpp"
#include "protodetect/io.hpp"
#include "protodetect/log.hpp"
#include "protodetect/proto_builder.hpp"
#include "protodetect/random.hpp"
#include "protodetect/trainer.hpp"
#include "protodetect/validate.hpp"
