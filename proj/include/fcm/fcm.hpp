#pragma once

#include "fcm/autodiff.hpp"
#include "fcm/checkpoint.hpp"
#include "fcm/data.hpp"
#include "fcm/error.hpp"
#include "fcm/eval.hpp"
#include "fcm/masking.hpp"
#include "fcm/model.hpp"
#include "fcm/optimizer.hpp"
#include "fcm/random.hpp"
#include "fcm/task.hpp"
#include "fcm/tensor.hpp"
#include "fcm/train.hpp"
#include "fcm/vocab.hpp"
