#ifndef FEDCARBON_H
#define FEDCARBON_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum FcStatus {
  FC_STATUS_OK = 0,
  FC_STATUS_NULL_POINTER = 1,
  FC_STATUS_INVALID_ARGUMENT = 2,
  FC_STATUS_INVALID_CONFIG = 3,
  FC_STATUS_RUNTIME = 4,
  FC_STATUS_TRACKER = 5,
  FC_STATUS_UNKNOWN_REGION = 6,
  FC_STATUS_PANIC = 7,
} FcStatus;

// Task phase of a tracker span.
typedef enum FcPhase {
  FC_PHASE_INIT = 0,
  FC_PHASE_ROUND = 1,
  FC_PHASE_EVALUATE = 2,
  FC_PHASE_IDLE = 3,
} FcPhase;

// Loaded run report handle.
typedef struct FcReport FcReport;

// Emissions tracker handle.
typedef struct FcTracker FcTracker;

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *fc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fc_version(void);

// Energy in kWh of a constant draw held for `duration_s` seconds.
//
// # Safety
// `out_kwh` must be null or valid for writes.
enum FcStatus fc_energy_kwh(double cpu_w,
                            double gpu_w,
                            double ram_w,
                            double duration_s,
                            double *out_kwh);

// Emissions in kg CO2e of `energy_kwh` at intensity `ci_kg_per_kwh`.
//
// # Safety
// `out_kg` must be null or valid for writes.
enum FcStatus fc_emissions_kg(double energy_kwh, double ci_kg_per_kwh, double *out_kg);

// Communication energy (kWh) of one update of `bytes` in both directions.
//
// # Safety
// `out_kwh` must be null or valid for writes.
enum FcStatus fc_comm_energy_kwh(uint64_t bytes, double net_intensity_kwh_per_gb, double *out_kwh);

// Communication emissions (kg CO2e) of one update of `bytes`.
//
// # Safety
// `out_kg` must be null or valid for writes.
enum FcStatus fc_comm_emissions_kg(uint64_t bytes,
                                   double net_intensity_kwh_per_gb,
                                   double ci_kg_per_kwh,
                                   double *out_kg);

// New tracker with the given sampling interval; null on invalid input.
struct FcTracker *fc_tracker_new(double sampling_interval_s);

// Releases a tracker. Null is ignored.
//
// # Safety
// `tracker` must be null or a pointer from [`fc_tracker_new`] not yet freed.
void fc_tracker_free(struct FcTracker *tracker);

// Registers a site so its (possibly empty) totals can be read.
//
// # Safety
// `tracker` must be a live tracker handle; `site_id` a valid C string.
enum FcStatus fc_tracker_register_site(struct FcTracker *tracker, const char *site_id);

// Opens a span at `at_s`; writes a span id to `out_span`. `round_index` is
// ignored for `Init` and must be >= 1 otherwise.
//
// # Safety
// `tracker` must be a live tracker handle; `site_id` a valid C string;
// `out_span` null or valid for writes.
enum FcStatus fc_tracker_start(struct FcTracker *tracker,
                               const char *site_id,
                               enum FcPhase phase,
                               uint32_t round_index,
                               double at_s,
                               uint64_t *out_span);

// Closes span `span` at `at_s` under a constant power draw and grid intensity.
//
// # Safety
// `tracker` must be a live tracker handle.
enum FcStatus fc_tracker_stop(struct FcTracker *tracker,
                              uint64_t span,
                              double at_s,
                              double cpu_w,
                              double gpu_w,
                              double ram_w,
                              double ci_kg_per_kwh);

// Energy, emissions and measured time summed over a site's closed spans.
//
// # Safety
// `tracker` must be a live tracker handle; `site_id` a valid C string;
// output pointers null or valid for writes.
enum FcStatus fc_tracker_totals(const struct FcTracker *tracker,
                                const char *site_id,
                                double *out_energy_kwh,
                                double *out_co2e_kg,
                                double *out_duration_s);

// Runs the scenario in `config_path`, writing artifacts to `out_dir`, and
// returns its report in `out_report` (may be null if not needed).
//
// # Safety
// String arguments must be valid C strings; `out_report` null or valid for writes.
enum FcStatus fc_run_config(const char *config_path,
                            const char *out_dir,
                            struct FcReport **out_report);

// Loads the run written to `dir`.
//
// # Safety
// `dir` must be a valid C string; `out_report` valid for writes.
enum FcStatus fc_report_load(const char *dir, struct FcReport **out_report);

// Releases a report. Null is ignored.
//
// # Safety
// `report` must be null or a handle returned by this library, not yet freed.
void fc_report_free(struct FcReport *report);

// Total energy (compute plus communication) and total emissions of a run.
//
// # Safety
// `report` must be a live report handle; outputs null or valid for writes.
enum FcStatus fc_report_totals(const struct FcReport *report,
                               double *out_energy_kwh,
                               double *out_co2e_kg);

// Simulated runtime of a run, in seconds.
//
// # Safety
// `report` must be a live report handle; `out_s` null or valid for writes.
enum FcStatus fc_report_runtime_s(const struct FcReport *report, double *out_s);

// Number of sites in a run.
//
// # Safety
// `report` must be a live report handle; `out_sites` null or valid for writes.
enum FcStatus fc_report_num_sites(const struct FcReport *report, size_t *out_sites);

// A new report with every region's intensity replaced by `ci_kg_per_kwh`.
//
// # Safety
// `report` must be a live report handle; `out_report` valid for writes.
enum FcStatus fc_report_remap_ci(const struct FcReport *report,
                                 double ci_kg_per_kwh,
                                 struct FcReport **out_report);

#endif  /* FEDCARBON_H */
