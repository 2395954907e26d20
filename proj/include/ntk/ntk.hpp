#pragma once

#include "ntk/data.hpp"
#include "ntk/error.hpp"
#include "ntk/finite_net.hpp"
#include "ntk/inference.hpp"
#include "ntk/kernel.hpp"
#include "ntk/kernel_io.hpp"
#include "ntk/netspec.hpp"
