#include <math.h>
#include <stdio.h>
#include <string.h>

#include "qromlab.h"

#define CHECK(cond)                                                      \
  do {                                                                   \
    if (!(cond)) {                                                       \
      const char *err = qrom_last_error();                               \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond, err ? err : ""); \
      return 1;                                                          \
    }                                                                    \
  } while (0)

int main(void) {
  size_t z2[] = {2};
  QromProtocol *p = NULL;
  CHECK(qrom_protocol_builtin("merkle", 8, z2, 1, &p) == QROM_STATUS_OK);
  size_t d = 0;
  bool inside = false;
  CHECK(qrom_protocol_info(p, &d, &inside) == QROM_STATUS_OK);
  CHECK(d == 2 && inside);

  QromAttackOutcome o;
  CHECK(qrom_attack_run(p, 0.05, 0.05, 7, 0, false, &o) == QROM_STATUS_OK);
  CHECK(o.k_e == o.k_a && o.k_a == o.k_b && o.k_e >= 0);
  CHECK(fabs(o.eq_find - 1.0) < 1e-9);

  char *json = NULL;
  CHECK(qrom_protocol_to_json(p, &json) == QROM_STATUS_OK);
  QromProtocol *q = NULL;
  CHECK(qrom_protocol_from_json(json, &q) == QROM_STATUS_OK);
  qrom_string_free(json);
  qrom_protocol_free(q);
  qrom_protocol_free(p);

  CHECK(qrom_protocol_builtin("nope", 8, z2, 1, &p) == QROM_STATUS_INVALID_ARGUMENT);
  CHECK(strstr(qrom_last_error(), "unknown builtin") != NULL);

  QromState *s = NULL;
  CHECK(qrom_state_new(4, z2, 1, &s) == QROM_STATUS_OK);
  CHECK(qrom_state_add(s, "x", 2) == QROM_STATUS_OK);
  CHECK(qrom_state_query(s, false) == QROM_STATUS_OK);
  double w = 0.0;
  CHECK(qrom_state_weight(s, 2, &w) == QROM_STATUS_OK);
  CHECK(fabs(w - 0.5) < 1e-12);
  qrom_state_free(s);
  printf("ok %s\n", qrom_version());
  return 0;
}
