//! `tomen`: every service, the echo-IP demo and the simulator behind one binary.

mod demo;
mod failure;
mod output;
mod services;
mod sim;

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::Failure;
use tomen::harness::{Mode, Topology};
use output::Output;

#[derive(Parser)]
#[command(name = "tomen", version, about = "Desk-scale onion routing with a transaction gossip overlay")]
struct Cli {
    /// Print line-delimited JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the directory server.
    Dir {
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// key=value file; reads directory.address.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a relay that publishes itself to the directory.
    Relay {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a gossip node.
    Gossip {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the bundled echo service.
    Echo {
        #[arg(long, default_value = "127.0.0.1:7007")]
        listen: SocketAddr,
        #[arg(long, value_enum, default_value_t = EchoKind::PeerAddr)]
        mode: EchoKind,
    },
    /// Onion proxy client.
    Client(ClientArgs),
    /// Demonstrations.
    Demo {
        #[command(subcommand)]
        demo: DemoCommand,
    },
    /// Deterministic simulator.
    Sim {
        #[command(subcommand)]
        sim: SimCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EchoKind {
    /// Answer with the caller's address.
    PeerAddr,
    /// Echo bytes back.
    Bytes,
}

#[derive(Args)]
struct ClientArgs {
    /// Directory address.
    #[arg(long)]
    dir: Option<SocketAddr>,
    /// key=value file with client.* keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed path selection and circuit ids from --seed (0 if absent).
    #[arg(long)]
    deterministic: bool,
    /// Local address to connect from.
    #[arg(long)]
    bind: Option<IpAddr>,
    #[command(subcommand)]
    verb: ClientVerb,
}

#[derive(Subcommand)]
enum ClientVerb {
    /// Build one circuit and print its path.
    Build {
        /// Port the exit must allow.
        #[arg(long, default_value_t = 8333)]
        port: u16,
    },
    /// Submit a transaction to a gossip node.
    SendTx {
        #[arg(long)]
        payload_hex: String,
        /// Gossip node submit address.
        #[arg(long, default_value = "127.0.0.1:8333")]
        to: SocketAddr,
        /// Skip the circuit and connect straight to the node.
        #[arg(long)]
        direct: bool,
    },
    /// Open a stream to a target through a circuit and print what comes back.
    Echo {
        #[arg(long)]
        target: SocketAddr,
        /// Text to send before reading.
        #[arg(long)]
        message: Option<String>,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Ask an echo service for our address directly and through a circuit.
    EchoIp {
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        relays: usize,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario and check it.
    Run(SimRunArgs),
    /// Re-check a transcript and rerun it byte for byte.
    Replay { transcript: PathBuf },
    /// Ask what a coalition of observers can link.
    Link {
        transcript: PathBuf,
        /// Observer ids, or the roles guard, middle, exit resolved per transaction.
        #[arg(long, value_delimiter = ',', required = true)]
        coalition: Vec<String>,
    },
}

#[derive(Args)]
struct SimRunArgs {
    /// Scenario file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// direct or onion
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    relays: Option<usize>,
    #[arg(long)]
    gossip: Option<usize>,
    /// line, ring, complete, star, random, or an edge list like 0-1,1-2
    #[arg(long)]
    topology: Option<Topology>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    txs: Option<usize>,
    #[arg(long)]
    rotation: bool,
    /// Write the transcript here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = Output::new(cli.json);
    match cli.command {
        Command::Dir { listen, config } => services::dir(&out, listen, config),
        Command::Relay { config } => services::relay(&out, &config),
        Command::Gossip { config } => services::gossip(&out, &config),
        Command::Echo { listen, mode } => services::echo(&out, listen, mode),
        Command::Client(args) => services::client(&out, args),
        Command::Demo {
            demo: DemoCommand::EchoIp { runs, seed, relays },
        } => demo::echo_ip(&out, runs, seed, relays),
        Command::Sim { sim } => match sim {
            SimCommand::Run(args) => sim::run(&out, args),
            SimCommand::Replay { transcript } => sim::replay(&out, &transcript),
            SimCommand::Link { transcript, coalition } => sim::link(&out, &transcript, &coalition),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(Failure::USAGE),
            };
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            Output::new(json).error(&f);
            ExitCode::from(f.code())
        }
    }
}
