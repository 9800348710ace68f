//! Memory, parallelism, accelerator and I/O estimates from extracted evidence.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{AllocSite, AnalysisError, ArtifactNames};
use crate::constraints::{Confidence, ConstraintEstimate, IoIntensity, NO_EVIDENCE_MEMORY_GB};
use crate::num::GIB;

/// Sums known allocation sizes, optionally restricted to sites inside the
/// given symbols. Unknown sizes are counted but never guessed.
pub fn estimate_memory_gb(sites: &[AllocSite], reachable: Option<&BTreeSet<String>>) -> ConstraintEstimate<f64> {
    let considered: Vec<&AllocSite> = sites
        .iter()
        .filter(|s| match reachable {
            Some(filter) => s.symbol.as_ref().is_some_and(|sym| filter.contains(sym)),
            None => true,
        })
        .collect();
    let excluded = sites.len() - considered.len();
    let known: Vec<u64> = considered.iter().filter_map(|s| s.bytes).collect();
    let unknown = considered.len() - known.len();

    if known.is_empty() {
        let why = if considered.is_empty() {
            "no allocation sites found".to_string()
        } else {
            format!("{unknown} allocation site(s) with register-computed sizes")
        };
        let est = ConstraintEstimate::new(
            NO_EVIDENCE_MEMORY_GB,
            Confidence::Low,
            format!("{why}; no static size evidence, using the {NO_EVIDENCE_MEMORY_GB} GB placeholder"),
        );
        return if considered.is_empty() { est } else { est.with_refs(["extract_allocations"]) };
    }

    let total: u128 = known.iter().map(|&b| u128::from(b)).sum();
    let gb = total as f64 / GIB as f64;
    let confidence = if unknown == 0 { Confidence::High } else { Confidence::Medium };
    let mut rationale = format!(
        "{} immediate allocation size(s) sum to {total} bytes = {gb:.3} GB",
        known.len()
    );
    if unknown > 0 {
        rationale.push_str(&format!("; {unknown} site(s) with non-immediate sizes excluded from the sum"));
    }
    if let Some(filter) = reachable {
        let names: Vec<&str> = filter.iter().map(String::as_str).collect();
        rationale.push_str(&format!("; restricted to reachable symbols [{}]", names.join(", ")));
        if excluded > 0 {
            rationale.push_str(&format!(", {excluded} unreachable site(s) ignored"));
        }
    }
    ConstraintEstimate::new(gb, confidence, rationale).with_refs(["extract_allocations"])
}

fn any_lib(names: &ArtifactNames, needles: &[&str]) -> Vec<String> {
    names
        .libraries
        .iter()
        .filter(|l| {
            let l = l.to_ascii_lowercase();
            needles.iter().any(|n| l.contains(n))
        })
        .cloned()
        .collect()
}

fn any_symbol(names: &ArtifactNames, pred: impl Fn(&str) -> bool) -> Vec<String> {
    names.symbols.iter().filter(|s| pred(s)).cloned().collect()
}

fn any_module(names: &ArtifactNames, wanted: &[&str]) -> Vec<String> {
    names
        .modules
        .iter()
        .filter(|m| wanted.contains(&m.split('.').next().unwrap_or(m)))
        .cloned()
        .collect()
}

fn openmp_markers(names: &ArtifactNames) -> Vec<String> {
    let mut found = any_lib(names, &["libgomp", "libomp", "libiomp"]);
    found.extend(any_symbol(names, |s| {
        s.starts_with("omp_") || s.starts_with("GOMP_") || s.starts_with("__kmpc_") || s.contains("omp_num_threads")
    }));
    found
}

fn mpi_markers(names: &ArtifactNames) -> Vec<String> {
    let mut found = any_lib(names, &["libmpi", "libmpich", "libpmpi"]);
    found.extend(any_symbol(names, |s| s.starts_with("MPI_Init") || s.starts_with("PMPI_Init")));
    found.extend(any_module(names, &["mpi4py"]));
    found
}

const LAUNCHERS: &[&str] = &["mpirun", "mpiexec", "srun", "aprun", "mpiexec.hydra"];

/// Rank count from a leading MPI launcher (`mpirun -np 4 ...`).
pub fn launcher_ranks(args: &[String]) -> Option<u32> {
    let first = args.first()?;
    let base = first.rsplit('/').next().unwrap_or(first);
    if !LAUNCHERS.contains(&base) {
        return None;
    }
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        for flag in ["-np", "-n", "--np", "--ntasks", "-N"] {
            if arg == flag {
                return it.next().and_then(|v| v.parse().ok()).filter(|&n: &u32| n > 0);
            }
            if let Some(v) = arg.strip_prefix(flag).and_then(|r| r.strip_prefix('=')) {
                return v.parse().ok().filter(|&n: &u32| n > 0);
            }
        }
    }
    None
}

fn thread_count(env: &BTreeMap<String, String>) -> Result<Option<u32>, AnalysisError> {
    let Some(raw) = env.get("OMP_NUM_THREADS") else { return Ok(None) };
    match raw.trim().parse::<u32>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(AnalysisError::MalformedThreadCount {
            var: "OMP_NUM_THREADS".into(),
            value: raw.clone(),
        }),
    }
}

/// CPU count from runtime markers combined with launch configuration.
/// Configuration without construct evidence is distrusted.
pub fn detect_parallelism(
    names: &ArtifactNames,
    env: &BTreeMap<String, String>,
    args: &[String],
) -> Result<ConstraintEstimate<u32>, AnalysisError> {
    let threads = thread_count(env)?;
    let omp = openmp_markers(names);
    let mpi = mpi_markers(names);
    let ranks = launcher_ranks(args);
    let pthread = names.symbols.contains("pthread_create");

    let mut refs = vec!["detect_parallelism".to_string()];
    if threads.is_some() {
        refs.push("env:OMP_NUM_THREADS".into());
    }
    let show = |m: &[String]| m.iter().take(4).cloned().collect::<Vec<_>>().join(", ");

    let omp_threads = match (threads, omp.is_empty()) {
        (Some(n), false) => Some(n),
        _ => None,
    };
    let mismatch = match (threads, omp.is_empty()) {
        (Some(n), true) => Some(format!(
            "OMP_NUM_THREADS={n} is set but no OpenMP runtime or constructs were found, so it is ignored"
        )),
        _ => None,
    };

    let (value, confidence, mut rationale) = match (ranks, mpi.is_empty(), omp_threads) {
        (Some(r), false, Some(t)) => (
            r.saturating_mul(t),
            Confidence::High,
            format!("MPI markers ({}) with {r} launcher ranks x {t} OpenMP threads ({})", show(&mpi), show(&omp)),
        ),
        (Some(r), false, None) => (
            r,
            Confidence::High,
            format!("MPI markers ({}) and {r} launcher ranks agree", show(&mpi)),
        ),
        (_, _, Some(t)) => (
            t,
            Confidence::High,
            format!("OMP_NUM_THREADS={t} and OpenMP markers ({}) agree", show(&omp)),
        ),
        (Some(r), true, None) => (
            r,
            Confidence::Medium,
            format!("launcher requests {r} ranks but no MPI markers were found"),
        ),
        (None, false, None) => (1, Confidence::Low, format!("MPI markers ({}) but no rank count configured", show(&mpi))),
        (None, true, None) if !omp.is_empty() => (
            1,
            Confidence::Low,
            format!("OpenMP markers ({}) but no thread count configured", show(&omp)),
        ),
        (None, true, None) => (1, Confidence::Low, "no parallel runtime evidence; assuming serial".to_string()),
    };
    if let Some(note) = mismatch {
        rationale = format!("{rationale}; {note}");
    }
    if pthread {
        rationale.push_str("; pthread_create present (thread count not statically known)");
    }
    let est = ConstraintEstimate::new(value.max(1), confidence, rationale);
    Ok(if confidence == Confidence::Low && omp.is_empty() && mpi.is_empty() && threads.is_none() {
        est
    } else {
        est.with_refs(refs)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelIoFindings {
    pub gpu_required: ConstraintEstimate<bool>,
    pub gpu_count: ConstraintEstimate<u32>,
    pub gpu_mem_gb: ConstraintEstimate<f64>,
    pub io_intensity: ConstraintEstimate<IoIntensity>,
    pub gpu_markers: Vec<String>,
    pub io_markers: Vec<String>,
}

fn gpu_markers(names: &ArtifactNames) -> Vec<String> {
    let mut found = any_lib(
        names,
        &["libcuda", "cublas", "cufft", "cudnn", "curand", "cusparse", "nccl", "nvrtc", "amdhip64", "rocblas", "hipblas", "rocm", "libhip"],
    );
    found.extend(any_symbol(names, |s| {
        s.starts_with("cuda")
            || s.starts_with("cu") && s[2..].starts_with(|c: char| c.is_ascii_uppercase())
            || s.starts_with("hip") && s[3..].starts_with(|c: char| c.is_ascii_uppercase())
            || s.starts_with("nvrtc")
            || s.starts_with("cublas")
    }));
    found.extend(any_module(names, &["cupy", "pycuda", "torch.cuda", "tensorflow", "jax", "numba.cuda"]));
    found
}

fn heavy_io_markers(names: &ArtifactNames) -> Vec<String> {
    let mut found = any_lib(names, &["hdf5", "adios", "pnetcdf"]);
    found.extend(any_symbol(names, |s| {
        s.starts_with("MPI_File_")
            || s.starts_with("H5") && s[2..].starts_with(|c: char| c.is_ascii_uppercase())
            || s.starts_with("adios2_")
    }));
    found.extend(any_module(names, &["h5py", "netCDF4", "adios2"]));
    found
}

fn moderate_io_markers(names: &ArtifactNames) -> Vec<String> {
    let mut found = any_lib(names, &["libnetcdf"]);
    found.extend(any_symbol(names, |s| {
        matches!(s, "fopen64" | "open64" | "lseek64" | "fseeko64" | "pread64" | "pwrite64" | "mmap64" | "ftello64")
    }));
    found.extend(any_module(names, &["pandas", "pyarrow", "zarr", "dask", "xarray"]));
    found
}

/// Accelerator requirement and I/O intensity from library/symbol markers.
pub fn detect_accel_and_io(names: &ArtifactNames) -> AccelIoFindings {
    let scanned = !names.is_empty();
    let absent_conf = if scanned { Confidence::Medium } else { Confidence::Low };
    let refs: Vec<String> = if scanned { vec!["detect_accel_io".into()] } else { Vec::new() };
    let show = |m: &[String]| m.iter().take(4).cloned().collect::<Vec<_>>().join(", ");

    let gpu = gpu_markers(names);
    let (gpu_required, gpu_count, gpu_mem_gb) = if gpu.is_empty() {
        let why = if scanned {
            "no GPU library or API markers among dependencies, symbols or imports"
        } else {
            "no artifacts to scan for GPU markers"
        };
        (
            ConstraintEstimate::new(false, absent_conf, why).with_refs(refs.clone()),
            ConstraintEstimate::new(0, absent_conf, "no GPU required").with_refs(refs.clone()),
            ConstraintEstimate::new(0.0, absent_conf, "no GPU required").with_refs(refs.clone()),
        )
    } else {
        (
            ConstraintEstimate::new(true, Confidence::High, format!("GPU markers found: {}", show(&gpu)))
                .with_refs(refs.clone()),
            ConstraintEstimate::new(1, Confidence::Low, "GPU in use; device count not statically known, assuming 1"),
            ConstraintEstimate::new(0.0, Confidence::Low, "GPU in use; device memory not statically known"),
        )
    };

    let heavy = heavy_io_markers(names);
    let moderate = moderate_io_markers(names);
    let (io, io_markers) = if !heavy.is_empty() {
        (
            ConstraintEstimate::new(IoIntensity::Heavy, Confidence::High, format!("parallel I/O markers: {}", show(&heavy)))
                .with_refs(refs.clone()),
            heavy,
        )
    } else if !moderate.is_empty() {
        (
            ConstraintEstimate::new(
                IoIntensity::Moderate,
                Confidence::Medium,
                format!("large-file or dataframe I/O markers: {}", show(&moderate)),
            )
            .with_refs(refs.clone()),
            moderate,
        )
    } else {
        (
            ConstraintEstimate::new(IoIntensity::Minimal, absent_conf, "no parallel or large-file I/O markers")
                .with_refs(refs),
            Vec::new(),
        )
    };

    AccelIoFindings {
        gpu_required,
        gpu_count,
        gpu_mem_gb,
        io_intensity: io,
        gpu_markers: gpu,
        io_markers,
    }
}
