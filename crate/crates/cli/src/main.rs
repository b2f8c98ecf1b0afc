use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use socfault_core::asm::listing;
use socfault_core::campaign::{self, read_csv, write_csv};
use socfault_core::{assemble, Heatmap, OutcomeRecord, ProbeSession, Repl, Scenario, SweepParams};

#[derive(Parser)]
#[command(name = "socfault", version, about = "Fault-injection simulator for a cached, MMU-equipped SoC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its outcome and forensics.
    Run {
        scenario: PathBuf,
        /// Also write cache dumps, mapping report, probe dump and metrics here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sweep the trigger delay and write one CSV row per shot.
    Sweep {
        scenario: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        delay_start: Option<i64>,
        #[arg(long, allow_hyphen_values = true)]
        delay_end: Option<i64>,
        #[arg(long)]
        step: Option<i64>,
        #[arg(long)]
        trials: Option<u32>,
        #[arg(long)]
        seed_base: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a sweep CSV as an SVG sensitivity map.
    Heatmap {
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario, then attach the probe and read commands.
    Debug {
        scenario: PathBuf,
        /// Command file to replay instead of reading stdin.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Assemble a source file into a flat binary and a JSON sidecar.
    Asm {
        source: PathBuf,
        /// Binary output path; the sidecar goes next to it with a .json extension.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print an address / word / disassembly listing.
        #[arg(long)]
        listing: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, out_dir } => run(&scenario, out_dir.as_deref()),
        Command::Sweep { scenario, delay_start, delay_end, step, trials, seed_base, out } => {
            let s = Scenario::load(&scenario)?;
            let defaults = s.sweep;
            let pick = |flag: Option<i64>, name: &str, field: fn(&SweepParams) -> i64| {
                flag.or(defaults.as_ref().map(field))
                    .with_context(|| format!("--{name} not given and the scenario has no sweep section"))
            };
            let params = SweepParams {
                delay_start: pick(delay_start, "delay-start", |p| p.delay_start)?,
                delay_end: pick(delay_end, "delay-end", |p| p.delay_end)?,
                step: pick(step, "step", |p| p.step)?,
                trials: trials.or(defaults.as_ref().map(|p| p.trials)).unwrap_or(27),
                seed_base: seed_base.or(defaults.as_ref().map(|p| p.seed_base)).unwrap_or(0),
            };
            sweep(&s, &params, &out)
        }
        Command::Heatmap { table, out } => heatmap(&table, &out),
        Command::Debug { scenario, script } => debug(&scenario, script.as_deref()),
        Command::Asm { source, out, listing } => asm(&source, out, listing),
    }
}

fn run(path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let scenario = Scenario::load(path)?;
    let rec = campaign::run_scenario(&scenario)?;
    print!("{}", summary(&scenario, &rec));
    if let Some(dir) = out_dir {
        write_forensics(dir, &rec)?;
        println!("forensics written to {}", dir.display());
    }
    Ok(())
}

fn summary(scenario: &Scenario, rec: &OutcomeRecord) -> String {
    let r = &rec.result;
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    if !scenario.name.is_empty() {
        line(format!("scenario: {}", scenario.name));
    }
    line(format!("outcome: {}", rec.class));
    let output = r.output.map_or("-".to_string(), |v| v.to_string());
    line(format!("output: {output} (expected {})", scenario.expected_output));
    line(format!("termination: {:?}", r.termination));
    line(format!("cycles: {}  instructions: {}", r.cycles, r.instructions));
    match r.mutations().next() {
        Some(m) => line(format!("mutation: {m}")),
        None => line("mutation: none".to_string()),
    }
    if let Some(m) = &r.mac {
        line(format!("mac: {}", serde_json::to_string(m).expect("metrics serialize")));
    }
    if let Some(f) = &rec.forensics {
        if let Some(d) = &f.divergence {
            line("-- replay".to_string());
            out.push_str(&d.to_string());
        }
        out.push_str("-- mapping\n");
        out.push_str(&f.mapping);
        out.push_str("-- probe dump\n");
        out.push_str(&f.probe_dump);
    }
    out
}

fn write_forensics(dir: &Path, rec: &OutcomeRecord) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    if let Some(m) = &rec.result.mac {
        write("metrics.json", &format!("{}\n", serde_json::to_string_pretty(m)?))?;
    }
    let Some(f) = &rec.forensics else { return Ok(()) };
    write("mapping.txt", &f.mapping)?;
    write("l1i.dump", &f.l1i)?;
    write("l1d.dump", &f.l1d)?;
    write("l2.dump", &f.l2)?;
    write("probe.txt", &f.probe_dump)?;
    if let Some(d) = &f.divergence {
        write("replay.txt", &d.to_string())?;
    }
    Ok(())
}

fn sweep(scenario: &Scenario, params: &SweepParams, out: &Path) -> Result<()> {
    if params.step <= 0 || params.delay_end < params.delay_start {
        bail!("empty delay range {}..{} step {}", params.delay_start, params.delay_end, params.step);
    }
    let image = scenario.image()?;
    let rows = campaign::sweep(scenario, &image, params)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&rows, BufWriter::new(file))?;
    println!("{} rows written to {}", rows.len(), out.display());
    print!("{}", Heatmap::from_rows(&rows)?.to_text());
    Ok(())
}

fn heatmap(table: &Path, out: &Path) -> Result<()> {
    let file = File::open(table).with_context(|| format!("opening {}", table.display()))?;
    let rows = read_csv(file).with_context(|| format!("reading {}", table.display()))?;
    let map = Heatmap::from_rows(&rows).with_context(|| table.display().to_string())?;
    fs::write(out, map.to_svg()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", map.to_text());
    Ok(())
}

fn debug(path: &Path, script: Option<&Path>) -> Result<()> {
    let scenario = Scenario::load(path)?;
    let image = scenario.image()?;
    let soc = campaign::execute(&scenario, &image, scenario.fault.clone())?;
    println!("attached at pc 0x{:08x} after {} cycles ({:?})", soc.state().pc, soc.state().cycles, soc.termination());
    let mut repl = Repl::new(ProbeSession::attach(soc));

    if let Some(script) = script {
        let text = fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?;
        print!("{}", repl.run_script(&text));
        return Ok(());
    }
    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut stdout = io::stdout();
    loop {
        if interactive {
            print!("socfault> ");
            stdout.flush()?;
        }
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let cmd = line.trim();
        if matches!(cmd, "quit" | "exit" | "q") {
            break;
        }
        if !interactive && !cmd.is_empty() && !cmd.starts_with('#') {
            println!("> {cmd}");
        }
        match repl.execute(cmd) {
            Ok(text) => print!("{text}"),
            Err(e) => println!("error: {e}"),
        }
    }
    Ok(())
}

fn asm(source: &Path, out: Option<PathBuf>, show_listing: bool) -> Result<()> {
    let text = fs::read_to_string(source).with_context(|| format!("reading {}", source.display()))?;
    let image = assemble(&text).map_err(|e| anyhow::anyhow!("{}:{}: {}", source.display(), e.line, e.kind))?;
    let bin = out.unwrap_or_else(|| source.with_extension("bin"));
    let sidecar = bin.with_extension("json");
    fs::write(&bin, image.to_bytes()).with_context(|| format!("writing {}", bin.display()))?;
    fs::write(&sidecar, format!("{}\n", serde_json::to_string_pretty(&image.meta())?))
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!(
        "{} words at 0x{:x}, entry 0x{:x} -> {} + {}",
        image.words.len(),
        image.base,
        image.entry,
        bin.display(),
        sidecar.display()
    );
    if show_listing {
        print!("{}", listing(&image));
    }
    Ok(())
}
