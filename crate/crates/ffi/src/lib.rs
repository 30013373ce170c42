//! C ABI over the `fedcarbon` simulator.
//!
//! Every fallible function returns an [`FcStatus`]; on failure a message is
//! available from [`fc_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`. Strings passed in must be NUL-terminated UTF-8.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fedcarbon::cli::{cmd_run, load_run};
use fedcarbon::comm::{comm_emissions, comm_energy_bytes, CommEnergyModel};
use fedcarbon::report::{remap_grid_intensity, RunReport};
use fedcarbon::site::GridRegion;
use fedcarbon::tracker::{EmissionsTracker, PhaseKind, SamplingPolicy, SpanHandle};
use fedcarbon::units::{
    emissions_of, energy_of, CarbonIntensity, EnergyKwh, PowerDrawW, SimDuration,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Runtime = 4,
    Tracker = 5,
    UnknownRegion = 6,
    Panic = 7,
}

/// Task phase of a tracker span.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcPhase {
    Init = 0,
    Round = 1,
    Evaluate = 2,
    Idle = 3,
}

/// Emissions tracker handle.
pub struct FcTracker {
    inner: EmissionsTracker,
    spans: BTreeMap<u64, SpanHandle>,
    next_span: u64,
}

/// Loaded run report handle.
pub struct FcReport {
    inner: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: FcStatus, msg: impl Into<String>) -> FcStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> FcStatus) -> FcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == FcStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => fail(FcStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, FcStatus> {
    if ptr.is_null() {
        return Err(fail(FcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(FcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> FcStatus {
    if out.is_null() {
        return fail(FcStatus::NullPointer, "output pointer is null");
    }
    *out = value;
    FcStatus::Ok
}

fn power(cpu_w: f64, gpu_w: f64, ram_w: f64) -> Result<PowerDrawW, FcStatus> {
    PowerDrawW::new(cpu_w, gpu_w, ram_w).map_err(|e| fail(FcStatus::InvalidArgument, e.to_string()))
}

fn ci(value: f64) -> Result<CarbonIntensity, FcStatus> {
    CarbonIntensity::new(value).map_err(|e| fail(FcStatus::InvalidArgument, e.to_string()))
}

fn seconds(value: f64) -> Result<SimDuration, FcStatus> {
    SimDuration::new(value).map_err(|e| fail(FcStatus::InvalidArgument, e.to_string()))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Energy in kWh of a constant draw held for `duration_s` seconds.
///
/// # Safety
/// `out_kwh` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_energy_kwh(
    cpu_w: f64,
    gpu_w: f64,
    ram_w: f64,
    duration_s: f64,
    out_kwh: *mut f64,
) -> FcStatus {
    guard(|| {
        let p = tri!(power(cpu_w, gpu_w, ram_w));
        let d = tri!(seconds(duration_s));
        write_out(out_kwh, energy_of(p, d).value())
    })
}

/// Emissions in kg CO2e of `energy_kwh` at intensity `ci_kg_per_kwh`.
///
/// # Safety
/// `out_kg` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_emissions_kg(
    energy_kwh: f64,
    ci_kg_per_kwh: f64,
    out_kg: *mut f64,
) -> FcStatus {
    guard(|| {
        let e = tri!(EnergyKwh::new(energy_kwh)
            .map_err(|e| fail(FcStatus::InvalidArgument, e.to_string())));
        let c = tri!(ci(ci_kg_per_kwh));
        write_out(out_kg, emissions_of(e, c).value())
    })
}

/// Communication energy (kWh) of one update of `bytes` in both directions.
///
/// # Safety
/// `out_kwh` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_comm_energy_kwh(
    bytes: u64,
    net_intensity_kwh_per_gb: f64,
    out_kwh: *mut f64,
) -> FcStatus {
    guard(|| {
        let model = tri!(CommEnergyModel::new(net_intensity_kwh_per_gb)
            .map_err(|e| fail(FcStatus::InvalidArgument, e.to_string())));
        write_out(out_kwh, comm_energy_bytes(bytes, &model).value())
    })
}

/// Communication emissions (kg CO2e) of one update of `bytes`.
///
/// # Safety
/// `out_kg` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_comm_emissions_kg(
    bytes: u64,
    net_intensity_kwh_per_gb: f64,
    ci_kg_per_kwh: f64,
    out_kg: *mut f64,
) -> FcStatus {
    guard(|| {
        let model = tri!(CommEnergyModel::new(net_intensity_kwh_per_gb)
            .map_err(|e| fail(FcStatus::InvalidArgument, e.to_string())));
        let grid = GridRegion {
            code: "ffi".into(),
            ci: tri!(ci(ci_kg_per_kwh)),
        };
        write_out(out_kg, comm_emissions(comm_energy_bytes(bytes, &model), &grid).value())
    })
}

/// New tracker with the given sampling interval; null on invalid input.
#[no_mangle]
pub extern "C" fn fc_tracker_new(sampling_interval_s: f64) -> *mut FcTracker {
    match SamplingPolicy::new(sampling_interval_s) {
        Ok(sampling) => {
            set_error("");
            Box::into_raw(Box::new(FcTracker {
                inner: EmissionsTracker::new(sampling),
                spans: BTreeMap::new(),
                next_span: 1,
            }))
        }
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Releases a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must be null or a pointer from [`fc_tracker_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fc_tracker_free(tracker: *mut FcTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Registers a site so its (possibly empty) totals can be read.
///
/// # Safety
/// `tracker` must be a live tracker handle; `site_id` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn fc_tracker_register_site(
    tracker: *mut FcTracker,
    site_id: *const c_char,
) -> FcStatus {
    guard(|| {
        let Some(t) = tracker.as_mut() else {
            return fail(FcStatus::NullPointer, "tracker is null");
        };
        let site = tri!(text(site_id, "site_id"));
        t.inner.register_site(site);
        FcStatus::Ok
    })
}

/// Opens a span at `at_s`; writes a span id to `out_span`. `round_index` is
/// ignored for `Init` and must be >= 1 otherwise.
///
/// # Safety
/// `tracker` must be a live tracker handle; `site_id` a valid C string;
/// `out_span` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_tracker_start(
    tracker: *mut FcTracker,
    site_id: *const c_char,
    phase: FcPhase,
    round_index: u32,
    at_s: f64,
    out_span: *mut u64,
) -> FcStatus {
    guard(|| {
        let Some(t) = tracker.as_mut() else {
            return fail(FcStatus::NullPointer, "tracker is null");
        };
        if out_span.is_null() {
            return fail(FcStatus::NullPointer, "output pointer is null");
        }
        let site = tri!(text(site_id, "site_id"));
        let phase = match phase {
            FcPhase::Init => PhaseKind::Init,
            FcPhase::Round => PhaseKind::Round(round_index),
            FcPhase::Evaluate => PhaseKind::Evaluate(round_index),
            FcPhase::Idle => PhaseKind::Idle(round_index),
        };
        let at = tri!(seconds(at_s));
        match t.inner.start_task(site, phase, at) {
            Ok(handle) => {
                let id = t.next_span;
                t.next_span += 1;
                t.spans.insert(id, handle);
                write_out(out_span, id)
            }
            Err(e) => fail(FcStatus::Tracker, e.to_string()),
        }
    })
}

/// Closes span `span` at `at_s` under a constant power draw and grid intensity.
///
/// # Safety
/// `tracker` must be a live tracker handle.
#[no_mangle]
pub unsafe extern "C" fn fc_tracker_stop(
    tracker: *mut FcTracker,
    span: u64,
    at_s: f64,
    cpu_w: f64,
    gpu_w: f64,
    ram_w: f64,
    ci_kg_per_kwh: f64,
) -> FcStatus {
    guard(|| {
        let Some(t) = tracker.as_mut() else {
            return fail(FcStatus::NullPointer, "tracker is null");
        };
        let Some(handle) = t.spans.get(&span).cloned() else {
            return fail(FcStatus::Tracker, format!("unknown span id {span}"));
        };
        let p = tri!(power(cpu_w, gpu_w, ram_w));
        let c = tri!(ci(ci_kg_per_kwh));
        let at = tri!(seconds(at_s));
        match t.inner.stop_task(&handle, at, p, c) {
            Ok(_) => {
                t.spans.remove(&span);
                FcStatus::Ok
            }
            Err(e) => fail(FcStatus::Tracker, e.to_string()),
        }
    })
}

/// Energy, emissions and measured time summed over a site's closed spans.
///
/// # Safety
/// `tracker` must be a live tracker handle; `site_id` a valid C string;
/// output pointers null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_tracker_totals(
    tracker: *const FcTracker,
    site_id: *const c_char,
    out_energy_kwh: *mut f64,
    out_co2e_kg: *mut f64,
    out_duration_s: *mut f64,
) -> FcStatus {
    guard(|| {
        let Some(t) = tracker.as_ref() else {
            return fail(FcStatus::NullPointer, "tracker is null");
        };
        if out_energy_kwh.is_null() || out_co2e_kg.is_null() || out_duration_s.is_null() {
            return fail(FcStatus::NullPointer, "output pointer is null");
        }
        let site = tri!(text(site_id, "site_id"));
        match t.inner.run_totals(site) {
            Ok((e, c, d)) => {
                *out_energy_kwh = e.value();
                *out_co2e_kg = c.value();
                *out_duration_s = d.seconds();
                FcStatus::Ok
            }
            Err(e) => fail(FcStatus::Tracker, e.to_string()),
        }
    })
}

fn report_handle(report: RunReport) -> *mut FcReport {
    Box::into_raw(Box::new(FcReport { inner: report }))
}

/// Runs the scenario in `config_path`, writing artifacts to `out_dir`, and
/// returns its report in `out_report` (may be null if not needed).
///
/// # Safety
/// String arguments must be valid C strings; `out_report` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_run_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_report: *mut *mut FcReport,
) -> FcStatus {
    guard(|| {
        let config = tri!(text(config_path, "config_path"));
        let dir = tri!(text(out_dir, "out_dir"));
        match cmd_run(Path::new(config), None, Some(Path::new(dir))) {
            Ok(report) => {
                if !out_report.is_null() {
                    *out_report = report_handle(report);
                }
                FcStatus::Ok
            }
            Err(e) if e.exit_code() == 2 => fail(FcStatus::InvalidConfig, e.to_string()),
            Err(e) => fail(FcStatus::Runtime, e.to_string()),
        }
    })
}

/// Loads the run written to `dir`.
///
/// # Safety
/// `dir` must be a valid C string; `out_report` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_report_load(dir: *const c_char, out_report: *mut *mut FcReport) -> FcStatus {
    guard(|| {
        let dir = tri!(text(dir, "dir"));
        if out_report.is_null() {
            return fail(FcStatus::NullPointer, "output pointer is null");
        }
        match load_run(Path::new(dir)) {
            Ok(run) => write_out(out_report, report_handle(run.report)),
            Err(e) => fail(FcStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a report. Null is ignored.
///
/// # Safety
/// `report` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fc_report_free(report: *mut FcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Total energy (compute plus communication) and total emissions of a run.
///
/// # Safety
/// `report` must be a live report handle; outputs null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_report_totals(
    report: *const FcReport,
    out_energy_kwh: *mut f64,
    out_co2e_kg: *mut f64,
) -> FcStatus {
    guard(|| {
        let Some(r) = report.as_ref() else {
            return fail(FcStatus::NullPointer, "report is null");
        };
        if out_energy_kwh.is_null() || out_co2e_kg.is_null() {
            return fail(FcStatus::NullPointer, "output pointer is null");
        }
        *out_energy_kwh = r.inner.total_energy_kwh;
        *out_co2e_kg = r.inner.total_co2e_kg;
        FcStatus::Ok
    })
}

/// Simulated runtime of a run, in seconds.
///
/// # Safety
/// `report` must be a live report handle; `out_s` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_report_runtime_s(report: *const FcReport, out_s: *mut f64) -> FcStatus {
    guard(|| match report.as_ref() {
        Some(r) => write_out(out_s, r.inner.runtime_s),
        None => fail(FcStatus::NullPointer, "report is null"),
    })
}

/// Number of sites in a run.
///
/// # Safety
/// `report` must be a live report handle; `out_sites` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_report_num_sites(report: *const FcReport, out_sites: *mut usize) -> FcStatus {
    guard(|| match report.as_ref() {
        Some(r) => write_out(out_sites, r.inner.num_sites),
        None => fail(FcStatus::NullPointer, "report is null"),
    })
}

/// A new report with every region's intensity replaced by `ci_kg_per_kwh`.
///
/// # Safety
/// `report` must be a live report handle; `out_report` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fc_report_remap_ci(
    report: *const FcReport,
    ci_kg_per_kwh: f64,
    out_report: *mut *mut FcReport,
) -> FcStatus {
    guard(|| {
        let Some(r) = report.as_ref() else {
            return fail(FcStatus::NullPointer, "report is null");
        };
        if out_report.is_null() {
            return fail(FcStatus::NullPointer, "output pointer is null");
        }
        let c = tri!(ci(ci_kg_per_kwh));
        let map = r.inner.region_intensities().into_keys().map(|k| (k, c)).collect();
        match remap_grid_intensity(&r.inner, &map) {
            Ok(remapped) => write_out(out_report, report_handle(remapped)),
            Err(e) => fail(FcStatus::UnknownRegion, e.to_string()),
        }
    })
}
