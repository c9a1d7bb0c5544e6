#pragma once

#include <gtest/gtest.h>

#include <cstdio>
#include <string>
#include <vector>

#include "ontoext/error.hpp"
#include "ontoext/ontology.hpp"
#include "ontoext/util.hpp"
#include "fixtures.hpp"

#define EXPECT_THROW_KIND(stmt, expected_kind)                                  \
  do {                                                                          \
    try {                                                                       \
      (void)(stmt);                                                             \
      ADD_FAILURE() << "expected " << ::ontoext::to_string(expected_kind);      \
    } catch (const ::ontoext::Error& e_) {                                      \
      EXPECT_EQ(e_.kind(), expected_kind) << e_.what();                         \
    }                                                                           \
  } while (0)
