#include <stdio.h>
#include <stdlib.h>

#include "mixedq.h"

#define CHECK(call)                                                   \
  do {                                                                \
    if ((call) != MIXEDQ_STATUS_OK) {                                 \
      fprintf(stderr, "%s: %s\n", #call, mixedq_last_error());        \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  MixedqModelConfig cfg = mixedq_model_config_default();
  cfg.depth = 2;
  cfg.embed_dim = 32;

  MixedqModel *model = NULL;
  CHECK(mixedq_model_new(&cfg, &model));

  size_t batches = 2, batch = 4;
  size_t n = batches * batch * cfg.seq_len * cfg.input_dim;
  double *data = malloc(n * sizeof *data);
  srand(7);
  for (size_t i = 0; i < n; i++) data[i] = 2.0 * rand() / RAND_MAX - 1.0;

  MixedqTable *table = NULL;
  CHECK(mixedq_analyze(model, data, n, batches, batch, &table));

  MixedqAssignment *map = NULL;
  CHECK(mixedq_select(table, MIXEDQ_RULE_SQNR_DIFF, &map));

  char *json = NULL;
  CHECK(mixedq_assignment_to_json(map, &json));
  printf("%s\n", json);

  mixedq_string_free(json);
  mixedq_assignment_free(map);
  mixedq_table_free(table);
  mixedq_model_free(model);
  free(data);
  return 0;
}
