/* C interface of the field delineation toolkit.
 *
 * Every call returns an fk_status; on failure fk_last_error() describes the
 * problem for the calling thread until its next failing call. Objects are
 * opaque handles released with their *_free function. Strings returned
 * through char** out-parameters are owned by the caller and released with
 * fk_string_free. JSON arguments may be NULL where noted, meaning defaults.
 */
#ifndef FIELDKIT_H
#define FIELDKIT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FK_API __declspec(dllexport)
#else
#define FK_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fk_status {
  FK_OK = 0,
  FK_ERR_INVALID_ARGUMENT = 1,
  FK_ERR_SHAPE = 2,
  FK_ERR_IO = 3,
  FK_ERR_FORMAT = 4,
  FK_ERR_UNSUPERVISABLE = 5,
  FK_ERR_NUMERIC = 6,
  FK_ERR_RUNTIME = 7
} fk_status;

typedef enum fk_dtype { FK_FLOAT32 = 0, FK_UINT8 = 1, FK_UINT32 = 2 } fk_dtype;

typedef struct fk_raster fk_raster;
typedef struct fk_scene fk_scene;
typedef struct fk_model fk_model;

/* Called with one human-readable line per finished step. */
typedef void (*fk_progress_fn)(const char* message, void* user);

FK_API const char* fk_version(void);
FK_API const char* fk_last_error(void);
FK_API const char* fk_status_name(fk_status s);
FK_API void fk_string_free(char* s);
/* Worker threads for parallel loops; 0 uses the hardware concurrency. */
FK_API void fk_set_threads(int n);

/* Rasters: planar channel-major arrays with georeferencing. */
FK_API fk_status fk_raster_read(const char* stem, fk_raster** out);
FK_API fk_status fk_raster_write(const fk_raster* r, const char* stem);
FK_API fk_status fk_raster_info(const fk_raster* r, fk_dtype* dtype, int* channels, int* height, int* width);
/* Borrowed pointer to channels * height * width elements of the raster's dtype. */
FK_API const void* fk_raster_data(const fk_raster* r);
FK_API void fk_raster_free(fk_raster* r);

/* Synthetic scenes. spec_json holds landscape parameters, optionally with a
 * "preset" key. */
FK_API fk_status fk_scene_generate(const char* spec_json, fk_scene** out);
FK_API fk_status fk_scene_load(const char* dir, fk_scene** out);
FK_API fk_status fk_scene_save(const fk_scene* s, const char* dir);
/* {"spec", "height", "width", "n_fields", "n_seasons", "field_areas_px"} */
FK_API fk_status fk_scene_info(const fk_scene* s, char** json);
/* Copy of one season's imagery. */
FK_API fk_status fk_scene_season(const fk_scene* s, int season, fk_raster** out);
FK_API fk_status fk_scene_field_ids(const fk_scene* s, fk_raster** out);
FK_API void fk_scene_free(fk_scene* s);
/* Comma-separated preset names. */
FK_API const char* fk_preset_names(void);

/* Domains: directories of scenes with a split assignment and a manifest.
 * config_json: {"name", "preset" | "spec", "n_scenes", "grid", "fractions"}.
 * Refuses a non-empty directory unless force is set. */
FK_API fk_status fk_domain_generate(const char* config_json, uint64_t seed, const char* dir, int force,
                                    char** summary_json);
/* Parses and validates a domain config without generating anything. */
FK_API fk_status fk_domain_validate(const char* config_json);
/* Reassigns splits of an existing domain. split_json: {"grid": [rows, cols],
 * "fractions": [train, val, test]}; NULL keeps the stored grid. */
FK_API fk_status fk_domain_split(const char* dir, const char* split_json, uint64_t seed, char** summary_json);

/* Label rasters from GeoJSON polygons on a grid given as
 * {"height", "width", "pixel_size_m", "origin_xy"}. Writes extent, boundary,
 * distance and mask rasters into out_dir. options_json: {"boundary_thickness",
 * "mask_dilation", "fields": [ids]}; NULL labels every polygon. */
FK_API fk_status fk_rasterize(const char* geojson_path, const char* grid_json, const char* options_json,
                              const char* out_dir, char** report_json);

/* Models. */
FK_API fk_status fk_model_load(const char* stem, fk_model** out);
FK_API fk_status fk_model_save(const fk_model* m, const char* stem);
/* {"id", "spec", "provenance", "n_parameters"} */
FK_API fk_status fk_model_info(const fk_model* m, char** json);
FK_API void fk_model_free(fk_model* m);

/* Trains on a domain directory. config_json: {"network", "training",
 * "labels": {"fields_per_image", "n_images"} (absent = every field),
 * "temporal": {"mode": "single" | "separate" | "stacked", "season",
 * "shuffle"}, "adapter": "none" | "tile_mean"}. With parent_stem the parent
 * checkpoint is finetuned instead. log_csv may be NULL. */
FK_API fk_status fk_train(const char* config_json, const char* domain_dir, const char* parent_stem,
                          const char* log_csv, fk_progress_fn progress, void* user, fk_model** out,
                          char** result_json);

/* Three-band float raster (extent, boundary, distance) for one input image. */
FK_API fk_status fk_predict(fk_model* m, const fk_raster* image, fk_raster** maps);
/* Same for a scene; mode_json: {"mode", "season"}, NULL = first season. */
FK_API fk_status fk_predict_scene(fk_model* m, const fk_scene* s, const char* mode_json, fk_raster** maps);

/* Watershed instances from a (extent, boundary, ...) probability raster.
 * cropmask (uint8, may be NULL) removes non-crop pixels afterwards. */
FK_API fk_status fk_segment(const fk_raster* maps, const char* params_json, const fk_raster* cropmask,
                            fk_raster** instances, char** info_json);
/* Writes instance polygons as GeoJSON. */
FK_API fk_status fk_vectorize(const fk_raster* instances, const char* geojson_path, char** report_json);

/* Evaluates a model on one split of a domain. options_json: {"split",
 * "temporal", "watershed", "tune_watershed", "exclusive"}. */
FK_API fk_status fk_evaluate(fk_model* m, const char* domain_dir, const char* options_json, char** report_json,
                             char** per_field_csv);

/* Runs an experiment config and writes report.json, results.csv and
 * summary.csv into out_dir. seed_override < 0 keeps the configured seeds. */
FK_API fk_status fk_experiment_run(const char* config_json, int jobs, int64_t seed_override, fk_progress_fn progress,
                                   void* user, const char* out_dir, char** report_json);
FK_API fk_status fk_experiment_default_config(const char* scenario, char** json);

#ifdef __cplusplus
}
#endif

#endif
