/*
 * Copyright 2026 The ResCBAM-Det Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef RESCBAM_RESCBAM_H_
#define RESCBAM_RESCBAM_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define RCB_API __declspec(dllexport)
#else
#define RCB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rcb_status {
  RCB_OK = 0,
  RCB_ERR_USAGE = 1,  /* bad argument, config or shape */
  RCB_ERR_DATA = 2,   /* unreadable or malformed files, empty splits */
  RCB_ERR_CHECK = 3,  /* a verification harness found a failure */
  RCB_ERR_INTERNAL = 4
} rcb_status;

typedef struct rcb_config rcb_config;
typedef struct rcb_dataset rcb_dataset;
typedef struct rcb_model rcb_model;

/* Message of the last failing call on this thread; "" after success. */
RCB_API const char* rcb_last_error(void);
RCB_API const char* rcb_version(void);

/*
 * Functions that return text write a NUL-terminated string into buf. When
 * cap is too small they return RCB_ERR_USAGE; *needed (if non-NULL) always
 * receives the required size including the terminator.
 */

/* ---- config ---- */

/* preset: "desk" (defaults) or "paper". */
RCB_API rcb_status rcb_config_new(const char* preset, rcb_config** out);
RCB_API void rcb_config_free(rcb_config* config);
/* Applies "key = value" lines from a file on top of the current values. */
RCB_API rcb_status rcb_config_load(rcb_config* config, const char* path);
RCB_API rcb_status rcb_config_set(rcb_config* config, const char* key, const char* value);
RCB_API rcb_status rcb_config_get(const rcb_config* config, const char* key, char* buf, size_t cap, size_t* needed);
RCB_API rcb_status rcb_config_render(const rcb_config* config, char* buf, size_t cap, size_t* needed);
RCB_API size_t rcb_config_key_count(void);
RCB_API const char* rcb_config_key(size_t index);

/* ---- datasets ---- */

RCB_API rcb_status rcb_dataset_load(const char* dir, size_t num_classes, size_t image_size, rcb_dataset** out);
/* imbalance may be NULL (uniform) or hold num_classes weights. */
RCB_API rcb_status rcb_dataset_generate(size_t n, size_t num_classes, uint64_t seed, size_t image_size,
                                        const double* imbalance, size_t imbalance_len, rcb_dataset** out);
RCB_API void rcb_dataset_free(rcb_dataset* dataset);
/* Replaces the split manifest with a seeded split of all samples. */
RCB_API rcb_status rcb_dataset_split(rcb_dataset* dataset, uint64_t seed, double train, double val, double test);
RCB_API rcb_status rcb_dataset_save(const rcb_dataset* dataset, const char* dir);
/* split: "all", "train", "val" or "test". */
RCB_API rcb_status rcb_dataset_count(const rcb_dataset* dataset, const char* split, size_t* count);
RCB_API rcb_status rcb_dataset_clipped_labels(const rcb_dataset* dataset, size_t* count);

/* ---- models ---- */

typedef struct rcb_model_info {
  size_t num_classes;
  size_t input_size;
  size_t reg_max;
  size_t params;
  uint64_t flops;
  size_t attention_blocks;
  char attention[16];
} rcb_model_info;

RCB_API rcb_status rcb_model_build(const rcb_config* config, rcb_model** out);
RCB_API rcb_status rcb_model_load(const char* path, rcb_model** out);
RCB_API rcb_status rcb_model_save(const rcb_model* model, const char* path);
RCB_API rcb_status rcb_model_info_get(rcb_model* model, rcb_model_info* info);
RCB_API void rcb_model_free(rcb_model* model);
RCB_API rcb_status rcb_class_name(size_t num_classes, size_t index, char* buf, size_t cap, size_t* needed);

/* ---- training ---- */

typedef struct rcb_epoch_record {
  size_t epoch;
  double lr;
  double loss, bce, dfl, ciou;
  double val_map50; /* -1 without validation data */
} rcb_epoch_record;

typedef void (*rcb_epoch_fn)(const rcb_epoch_record* record, const char* line, void* user);
typedef void (*rcb_note_fn)(const char* message, void* user);

/*
 * Trains on the named split (val_split may be NULL). initial may be NULL for
 * a fresh build from the config; otherwise its spec must match the data.
 * On success *last and *best receive new handles.
 */
RCB_API rcb_status rcb_train(const rcb_config* config, const rcb_dataset* dataset, const char* train_split,
                             const char* val_split, const rcb_model* initial, rcb_epoch_fn on_epoch,
                             rcb_note_fn on_note, void* user, rcb_model** last, rcb_model** best);

/* ---- evaluation and inference ---- */

typedef struct rcb_eval_summary {
  double map50, map5095, f1;
  double ms_per_image;
  size_t params;
  uint64_t flops;
  size_t gt, predictions, matched, images;
} rcb_eval_summary;

/* Writes report.txt, report.kv and pr_curve.csv into report_dir when it is
 * non-NULL. */
RCB_API rcb_status rcb_evaluate(rcb_model* model, const rcb_config* config, const rcb_dataset* dataset,
                                const char* split, const char* report_dir, rcb_eval_summary* summary);

typedef struct rcb_detection {
  int class_id;
  double confidence;
  double x1, y1, x2, y2; /* pixels of the original image */
} rcb_detection;

/*
 * Detections sorted by confidence, descending. *count receives the total;
 * at most cap entries are written. annotated_ppm may be NULL.
 */
RCB_API rcb_status rcb_predict_image(rcb_model* model, const char* image_path, double conf_threshold,
                                     double iou_threshold, rcb_detection* out, size_t cap, size_t* count,
                                     const char* annotated_ppm);

/* ---- verification and experiments ---- */

typedef void (*rcb_text_fn)(const char* text, void* user);

/* scope: "op", "module", "model" or "all". The result table goes to
 * on_table; returns RCB_ERR_CHECK when any check fails. */
RCB_API rcb_status rcb_gradcheck(const char* scope, uint64_t seed, rcb_text_fn on_table, void* user);

/* Baseline and +ResCBAM at each input size, trained on train_split and
 * evaluated on test_split. */
RCB_API rcb_status rcb_ablate(const rcb_config* config, const rcb_dataset* dataset, const char* train_split,
                              const char* test_split, const size_t* input_sizes, size_t n_sizes,
                              rcb_text_fn on_table, void* user);

#ifdef __cplusplus
}
#endif

#endif /* RESCBAM_RESCBAM_H_ */
