//! Command-line front end: measure images, derive MAINFO records,
//! instrument groups, derive peer measurements, run the migration demo
//! and benchmark derivation.
//!
//! Exit codes: 0 success, 2 usage, 3 parse/format, 4 capacity,
//! 5 verification failure or aborted session.

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mage_core::build::{
    derive_mainfo, final_measurement, instrument_group, BuildError,
};
use mage_core::derive::{derive_measurement, DeriveError, MageView, ViewSource};
use mage_core::fixtures::random_group;
use mage_core::image::{EnclaveImage, Loader, Variant};
use mage_core::measure::{measure_enclave, PAGE_SIZE};
use mage_core::merkle::instrument_group_merkle;
use mage_core::protocol::{
    run_session, Adversary, Channel, EnclaveRuntime, Env, KeyExchange, SessionState, X25519Kex,
};
use mage_core::{Mainfo, Platform};
use rand::RngCore;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_PARSE: u8 = 3;
const EXIT_CAPACITY: u8 = 4;
const EXIT_VERIFY: u8 = 5;

#[derive(Parser)]
#[command(name = "mage", version, about = "Enclave measurement and group attestation tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LoaderArg {
    Modified,
    Unmodified,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Basic,
    Split,
    Merkle,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Basic => Variant::Basic,
            VariantArg::Split => Variant::Split,
            VariantArg::Merkle => Variant::Merkle,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print an image's measurement.
    Measure {
        image: PathBuf,
        #[arg(long, value_enum, default_value = "modified")]
        loader: LoaderArg,
    },
    /// Print an image's resumable pre-measurement record (hex, 48 bytes).
    Mainfo { image: PathBuf },
    /// Fill every image's reserved section with the group records and
    /// write the results plus a measurement manifest.
    Instrument {
        images: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Derive group member `index`'s measurement from an image's section.
    Derive { image: PathBuf, index: u64 },
    /// Run a secret-migration session between two group members.
    Demo {
        group_dir: PathBuf,
        /// honest | drop:K | replay:K | tamper:K[:BYTE]
        #[arg(long, default_value = "honest")]
        adversary: String,
    },
    /// Benchmark measurement derivation; prints CSV page_count,mean_ns.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        pages: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        entries: u64,
    },
    /// Generate a synthetic uninstrumented group for experiments.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        content_pages: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        mars_pages: usize,
        #[arg(long, value_enum, default_value = "basic")]
        variant: VariantArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: anyhow::Error) -> Self {
        Failure { code, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure::new(1, error)
    }
}

fn load_image(path: &Path) -> Result<EnclaveImage, Failure> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(EXIT_PARSE, e))?;
    EnclaveImage::parse(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|e| Failure::new(EXIT_PARSE, e))
}

fn build_failure(err: BuildError) -> Failure {
    let code = match err {
        BuildError::CapacityExceeded { .. } => EXIT_CAPACITY,
        _ => EXIT_VERIFY,
    };
    Failure::new(code, err.into())
}

fn cmd_measure(path: &Path, loader: LoaderArg) -> Result<(), Failure> {
    let img = load_image(path)?;
    let order = img.load_order(match loader {
        LoaderArg::Modified => Loader::Modified,
        LoaderArg::Unmodified => Loader::Unmodified,
    });
    let digest = measure_enclave(&img.params, order)
        .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
    println!("{}", hex::encode(digest));
    Ok(())
}

fn cmd_mainfo(path: &Path) -> Result<(), Failure> {
    let img = load_image(path)?;
    let record = derive_mainfo(&img).map_err(build_failure)?;
    println!("{}", hex::encode(record.to_bytes()));
    Ok(())
}

fn cmd_instrument(paths: &[PathBuf], out_dir: &Path) -> Result<(), Failure> {
    if paths.is_empty() {
        return Err(Failure::new(2, anyhow!("no input images given")));
    }
    let mut images = paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>, _>>()?;
    let variant = images[0].variant;

    std::fs::create_dir_all(out_dir).context("creating output directory")?;
    let sidecar = match variant {
        Variant::Merkle => Some(instrument_group_merkle(&mut images).map_err(build_failure)?),
        _ => {
            instrument_group(&mut images).map_err(build_failure)?;
            None
        }
    };
    if let Some(sidecar) = sidecar {
        std::fs::write(out_dir.join("sidecar.bin"), sidecar.serialize())
            .context("writing sidecar")?;
    }

    let mut manifest = String::new();
    for (i, (path, img)) in paths.iter().zip(&images).enumerate() {
        let name = path
            .file_name()
            .ok_or_else(|| Failure::new(2, anyhow!("bad input path {}", path.display())))?;
        let out_path = out_dir.join(name);
        std::fs::write(&out_path, img.serialize())
            .with_context(|| format!("writing {}", out_path.display()))?;
        let m = final_measurement(img).map_err(build_failure)?;
        manifest.push_str(&format!(
            "{} {} {}\n",
            name.to_string_lossy(),
            hex::encode(m),
            i
        ));
    }
    std::fs::write(out_dir.join("manifest.txt"), manifest).context("writing manifest")?;
    println!("instrumented {} images into {}", images.len(), out_dir.display());
    Ok(())
}

fn cmd_derive(path: &Path, index: u64) -> Result<(), Failure> {
    let img = load_image(path)?;
    let view = MageView::from_image(&img).map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
    let digest = derive_measurement(&view, index).map_err(|e| {
        let code = match e {
            DeriveError::IndexOutOfRange { .. } => EXIT_VERIFY,
            _ => EXIT_PARSE,
        };
        Failure::new(code, e.into())
    })?;
    println!("{}", hex::encode(digest));
    Ok(())
}

fn parse_adversary(spec: &str) -> Result<Adversary, Failure> {
    let usage = || Failure::new(2, anyhow!("bad adversary spec {spec:?}"));
    let mut parts = spec.split(':');
    let kind = parts.next().unwrap();
    let step = |parts: &mut std::str::Split<char>| -> Result<u8, Failure> {
        let s: u8 = parts
            .next()
            .ok_or_else(usage)?
            .parse()
            .map_err(|_| usage())?;
        if !(1..=4).contains(&s) {
            return Err(usage());
        }
        Ok(s)
    };
    let adversary = match kind {
        "honest" => Adversary::Honest,
        "drop" => Adversary::Drop(step(&mut parts)?),
        "replay" => Adversary::Replay(step(&mut parts)?),
        "tamper" => {
            let s = step(&mut parts)?;
            let byte_index = match parts.next() {
                Some(b) => b.parse().map_err(|_| usage())?,
                None => 30,
            };
            Adversary::Tamper { step: s, byte_index }
        }
        _ => return Err(usage()),
    };
    if parts.next().is_some() {
        return Err(usage());
    }
    Ok(adversary)
}

fn cmd_demo(group_dir: &Path, adversary_spec: &str) -> Result<(), Failure> {
    let adversary = parse_adversary(adversary_spec)?;

    let mut paths: Vec<PathBuf> = std::fs::read_dir(group_dir)
        .with_context(|| format!("reading {}", group_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "mimg"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Failure::new(
            2,
            anyhow!("demo needs at least two .mimg images in {}", group_dir.display()),
        ));
    }
    let images = paths
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>, _>>()?;

    // Group indices come from matching each image's measurement against
    // the entries in the first image's section. An image missing from
    // the section (an impostor) claims index 0 and will be rejected.
    let reference = MageView::from_image(&images[0])
        .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
    let count = mage_core::derive::mage_size(&reference)
        .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
    let table: Vec<[u8; 32]> = (0..count)
        .map(|j| derive_measurement(&reference, j))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;

    let mut runtimes = Vec::new();
    for (path, img) in paths.iter().zip(&images) {
        let m = final_measurement(img).map_err(build_failure)?;
        let index = table.iter().position(|t| *t == m).unwrap_or(0) as u64;
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        runtimes.push(
            EnclaveRuntime::launch(img, name, index)
                .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?,
        );
    }
    let mut b = runtimes.remove(1);
    let mut a = runtimes.remove(0);
    let target_index = b.group_index;

    let mut os_rng = rand::rng();
    let mut platform_id = [0u8; 16];
    let mut root_secret = [0u8; 32];
    os_rng.fill_bytes(&mut platform_id);
    os_rng.fill_bytes(&mut root_secret);
    let platform = Platform::new(platform_id, root_secret);
    let mut secret = [0u8; 32];
    os_rng.fill_bytes(&mut secret);

    let mut channel = Channel::new(adversary);
    if let Adversary::Replay(step) = adversary {
        // Record the step from a prior honest session between the same
        // pair so the replayed bytes are plausible.
        let mut a0 = EnclaveRuntime::launch(&images[0], "prime-src", a.group_index)
            .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
        let mut b0 = EnclaveRuntime::launch(&images[1], "prime-dst", b.group_index)
            .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
        let mut honest = Channel::honest();
        let mut env = Env {
            platform: &platform,
            kex: &X25519Kex,
            rng: &mut os_rng,
        };
        run_session(&mut a0, &mut b0, &mut honest, &mut env, target_index, b"stale");
        let bytes = honest
            .transcript
            .iter()
            .find(|e| e.step == step)
            .map(|e| e.payload.clone())
            .ok_or_else(|| Failure::new(EXIT_VERIFY, anyhow!("no step {step} to replay")))?;
        channel.set_replay_source(step, bytes);
    }

    let mut env = Env {
        platform: &platform,
        kex: &X25519Kex,
        rng: &mut os_rng,
    };
    let outcome = run_session(&mut a, &mut b, &mut channel, &mut env, target_index, &secret);

    print!("{}", channel.export_transcript(X25519Kex.name()));
    println!("initiator {}: {:?}", a.name, outcome.initiator_state);
    println!("responder {}: {:?}", b.name, outcome.responder_state);

    let migrated = outcome.migrated_secret.as_deref() == Some(&secret[..]);
    if outcome.initiator_state == SessionState::Done
        && outcome.responder_state == SessionState::Done
        && migrated
    {
        println!("secret migrated");
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY, anyhow!("session did not complete")))
    }
}

fn cmd_bench(pages: &[usize], entries: u64) -> Result<(), Failure> {
    if entries == 0 {
        return Err(Failure::new(2, anyhow!("--entries must be at least 1")));
    }
    println!("page_count,mean_ns");
    for &p in pages {
        let needed = 8 + entries as usize * 48;
        if p * PAGE_SIZE < needed {
            return Err(Failure::new(
                EXIT_CAPACITY,
                anyhow!("{entries} entries need more than {p} pages"),
            ));
        }
        let mut mars = vec![0u8; p * PAGE_SIZE];
        mars[..8].copy_from_slice(&entries.to_le_bytes());
        for e in 0..entries {
            let at = 8 + e as usize * 48;
            mars[at..at + 48].copy_from_slice(
                &Mainfo {
                    premr: [e as u8; 32],
                    count: 64,
                    offset: 0x10000,
                }
                .to_bytes(),
            );
        }
        let view = MageView {
            mars_bytes: mars,
            mars_offset: 0x10000,
            variant: Variant::Basic,
            source: ViewSource::External,
        };
        let reps = (2000 / p).max(2) as u32;
        let t = Instant::now();
        for _ in 0..reps {
            derive_measurement(&view, entries - 1)
                .map_err(|e| Failure::new(EXIT_PARSE, e.into()))?;
        }
        let mean_ns = t.elapsed().as_nanos() / reps as u128;
        println!("{p},{mean_ns}");
    }
    Ok(())
}

fn cmd_gen(
    count: usize,
    content_pages: &[usize],
    mars_pages: usize,
    variant: Variant,
    seed: u64,
    out_dir: &Path,
) -> Result<(), Failure> {
    if count == 0 || content_pages.is_empty() {
        return Err(Failure::new(2, anyhow!("--count and --content-pages must be positive")));
    }
    let group = random_group(count, content_pages, mars_pages, variant, seed);
    std::fs::create_dir_all(out_dir).context("creating output directory")?;
    for (i, img) in group.iter().enumerate() {
        let path = out_dir.join(format!("img{i:03}.mimg"));
        std::fs::write(&path, img.serialize())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {count} images to {}", out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Measure { image, loader } => cmd_measure(&image, loader),
        Command::Mainfo { image } => cmd_mainfo(&image),
        Command::Instrument { images, out_dir } => cmd_instrument(&images, &out_dir),
        Command::Derive { image, index } => cmd_derive(&image, index),
        Command::Demo { group_dir, adversary } => cmd_demo(&group_dir, &adversary),
        Command::Bench { pages, entries } => cmd_bench(&pages, entries),
        Command::Gen {
            count,
            content_pages,
            mars_pages,
            variant,
            seed,
            out_dir,
        } => cmd_gen(count, &content_pages, mars_pages, variant.into(), seed, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
