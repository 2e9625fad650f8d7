//! `tim-client` — drive the client protocols against an installed world,
//! one invocation per action.
//!
//! A *station* directory holds everything between invocations: the world
//! artifacts and credential store (the proxy host's disk), a `targets/`
//! subdirectory standing in for the remote sites' own account storage, the
//! client profile, and a run counter. Each invocation resumes the world,
//! boots it fresh (registers reset on a platform restart; sealed state
//! survives by design), performs one action, and persists what changed.
//!
//! Sessions and page tokens are deliberately not persisted: they are
//! endpoint-bound, single-use state that dies with the process, so action
//! commands authenticate first with whichever credential the flags supply.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use titm::client::{Client, ClientError, ClientProfile};
use titm_harness::sim::Sim;
use titm_harness::world::{sub_rng, World, CLIENT_ADDR};

#[derive(Parser)]
#[command(name = "tim-client", about = "client-side driver for an installed station", version)]
struct Cli {
    /// Station directory (created by `init`).
    #[arg(long, short = 's', default_value = "./tim-station")]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Install a fresh station: world artifacts, target stubs, profile.
    Init {
        /// Root seed for the station's deterministic randomness.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Register the station's user and receive the one-time password list.
    Register {
        /// Master password to register.
        #[arg(long)]
        master: String,
        /// Secret phrase the password list derives from.
        #[arg(long)]
        phrase: String,
    },
    /// Authenticate once and report the session.
    Login {
        #[command(flatten)]
        auth: Auth,
    },
    /// Fetch a site page and print what it renders.
    Visit {
        /// Site identifier, e.g. bank.example.
        site: String,
        /// Page kind: login or update.
        #[arg(long, default_value = "login")]
        page: String,
        #[command(flatten)]
        auth: Auth,
    },
    /// Store credentials for a site's login page.
    Enroll {
        site: String,
        /// Field value as name=value; repeat per field.
        #[arg(long = "cred", value_parser = parse_pair, required = true)]
        creds: Vec<(String, String)>,
        #[command(flatten)]
        auth: Auth,
    },
    /// Have the proxy log in at the site with its stored credentials.
    Submit {
        site: String,
        #[command(flatten)]
        auth: Auth,
    },
    /// Rotate stored credentials through the site's update page.
    Update {
        site: String,
        /// Replacement value as name=value (e.g. new_password=...).
        #[arg(long = "cred", value_parser = parse_pair, required = true)]
        creds: Vec<(String, String)>,
        #[command(flatten)]
        auth: Auth,
    },
}

/// Exactly one way to prove who you are.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Auth {
    /// Master password.
    #[arg(long)]
    master: Option<String>,
    /// One one-time password from the printed list, spent on use.
    #[arg(long)]
    otp: Option<String>,
    /// Secret phrase; derives the next unspent one-time password locally.
    #[arg(long)]
    phrase: Option<String>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("{s:?} is not name=value"))
}

// ---------------------------------------------------------------------------
// Station state

struct Station {
    dir: PathBuf,
    run: u64,
    sim: Sim,
}

impl Station {
    fn station_file(dir: &Path) -> PathBuf {
        dir.join("station.txt")
    }

    fn profile_file(dir: &Path) -> PathBuf {
        dir.join("client.profile")
    }

    fn targets_file(dir: &Path) -> PathBuf {
        dir.join("targets").join("accounts.txt")
    }

    fn init(dir: &Path, seed: u64) -> Result<Station, String> {
        if Self::station_file(dir).exists() {
            return Err(format!(
                "{} already holds a station; pick another --state directory",
                dir.display()
            ));
        }
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        let world = World::install(seed, dir);
        world.profile().save(&Self::profile_file(dir)).map_err(|e| e.to_string())?;
        let station = Station { dir: dir.to_path_buf(), run: 0, sim: Sim::new(world) };
        station.persist(seed)?;
        Ok(station)
    }

    fn open(dir: &Path) -> Result<Station, String> {
        let text = fs::read_to_string(Self::station_file(dir))
            .map_err(|_| format!("{} is not a station; run `init` first", dir.display()))?;
        let mut seed = None;
        let mut run = None;
        for line in text.lines() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                Some(("run", v)) => run = v.parse::<u64>().ok(),
                _ => {}
            }
        }
        let (seed, run) = match (seed, run) {
            (Some(s), Some(r)) => (s, r + 1),
            _ => return Err("station.txt is malformed".to_string()),
        };
        let world = World::resume(seed, dir, run).map_err(|e| e.to_string())?;
        let station = Station { dir: dir.to_path_buf(), run, sim: Sim::new(world) };
        station.restore_targets()?;
        station.persist(seed)?;
        Ok(station)
    }

    fn persist(&self, seed: u64) -> Result<(), String> {
        fs::write(Self::station_file(&self.dir), format!("seed = {seed}\nrun = {}\n", self.run))
            .map_err(|e| e.to_string())
    }

    /// The `targets/` subdirectory models the sites' own account storage —
    /// a different machine entirely, which legitimately knows its users'
    /// passwords.
    fn restore_targets(&self) -> Result<(), String> {
        let path = Self::targets_file(&self.dir);
        let Ok(text) = fs::read_to_string(&path) else { return Ok(()) };
        for line in text.lines() {
            let mut parts = line.splitn(3, '\t');
            if let (Some(site), Some(user), Some(pw)) =
                (parts.next(), parts.next(), parts.next())
            {
                if let Some(target) = self.sim.world.sites.get(site) {
                    target.set_account(user, pw);
                }
            }
        }
        Ok(())
    }

    fn save_targets(&self) -> Result<(), String> {
        let path = Self::targets_file(&self.dir);
        fs::create_dir_all(path.parent().expect("targets path has a parent"))
            .map_err(|e| e.to_string())?;
        let mut text = String::new();
        for (site_id, site) in &self.sim.world.sites {
            for (user, pw) in site.accounts() {
                text.push_str(&format!("{site_id}\t{user}\t{pw}\n"));
            }
        }
        fs::write(&path, text).map_err(|e| e.to_string())
    }

    fn boot(&self) -> Result<(), String> {
        let report = self.sim.world.proxy.boot().map_err(|e| format!("boot refused: {e}"))?;
        eprintln!("station up: run {}, {} modules verified", self.run, report.modules.len());
        Ok(())
    }

    /// A client over the persisted profile, with this run's random stream.
    fn client(&self) -> Result<Client, String> {
        let profile =
            ClientProfile::load(&Self::profile_file(&self.dir)).map_err(|e| e.to_string())?;
        let rng = sub_rng(self.sim.world.seed, &format!("station-client:{}", self.run));
        Ok(Client::new(profile, rng))
    }

    /// Save everything an action may have changed.
    fn checkpoint(&self, client: &Client) -> Result<(), String> {
        client.profile.save(&Self::profile_file(&self.dir)).map_err(|e| e.to_string())?;
        self.sim.world.save_tpm().map_err(|e| e.to_string())?;
        self.save_targets()
    }
}

// ---------------------------------------------------------------------------
// Actions

fn describe(e: &ClientError) -> String {
    match e {
        ClientError::Refused { code, detail } => format!("refused ({code}): {detail}"),
        other => other.to_string(),
    }
}

fn authenticate(station: &Station, client: &mut Client, auth: &Auth) -> Result<u64, String> {
    let mut ch = station.sim.channel(CLIENT_ADDR);
    client.establish_tunnel(&mut ch).map_err(|e| format!("attestation: {}", describe(&e)))?;
    let (method, result) = if let Some(pw) = &auth.master {
        ("master password", client.login_master(&mut ch, pw))
    } else if let Some(pw) = &auth.otp {
        ("one-time password", client.login_with(&mut ch, "otp", pw))
    } else if let Some(phrase) = &auth.phrase {
        ("derived one-time password", client.login_otp(&mut ch, phrase))
    } else {
        unreachable!("clap enforces the auth group");
    };
    let session = result.map_err(|e| format!("login: {}", describe(&e)))?;
    println!("session {session} established ({method}); lives for this invocation");
    Ok(session)
}

fn visit_page(
    station: &Station,
    client: &mut Client,
    session: u64,
    site: &str,
    page: &str,
) -> Result<(u64, Vec<(String, String)>), String> {
    let mut ch = station.sim.channel(CLIENT_ADDR);
    client
        .visit(&mut ch, session, site, page)
        .map_err(|e| format!("visit {site}: {}", describe(&e)))
}

fn run() -> Result<(), (u8, String)> {
    let cli = Cli::parse();
    let usage = |msg: String| (2u8, msg);
    let protocol = |msg: String| (1u8, msg);

    match cli.command {
        Command::Init { seed } => {
            let station = Station::init(&cli.state, seed).map_err(usage)?;
            station.save_targets().map_err(usage)?;
            println!("station installed at {} (seed {seed})", cli.state.display());
            let sites: Vec<&str> =
                station.sim.world.sites.keys().map(String::as_str).collect();
            println!("target sites: {}", sites.join(", "));
            println!("next: tim-client -s {} register --master <pw> --phrase <ph>", cli.state.display());
            Ok(())
        }
        Command::Register { master, phrase } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            let mut ch = station.sim.channel(CLIENT_ADDR);
            client
                .establish_tunnel(&mut ch)
                .map_err(|e| protocol(format!("attestation: {}", describe(&e))))?;
            let params = client
                .register(&mut ch, &master, &phrase)
                .map_err(|e| protocol(format!("register: {}", describe(&e))))?;
            station.checkpoint(&client).map_err(usage)?;
            println!("registered; one-time password list parameters: {params}");
            println!("print the list now and keep it offline; each entry dies on use");
            Ok(())
        }
        Command::Login { auth } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            authenticate(&station, &mut client, &auth).map_err(protocol)?;
            station.checkpoint(&client).map_err(usage)?;
            Ok(())
        }
        Command::Visit { site, page, auth } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            let session = authenticate(&station, &mut client, &auth).map_err(protocol)?;
            let (token, fields) =
                visit_page(&station, &mut client, session, &site, &page).map_err(protocol)?;
            println!("{site} {page} page (single-use token {token}):");
            for (name, value) in &fields {
                let shown = if value.is_empty() { "(empty)" } else { value.as_str() };
                println!("  {name:<16} {shown}");
            }
            println!("filled credential fields are dummies; real values never render");
            station.checkpoint(&client).map_err(usage)?;
            Ok(())
        }
        Command::Enroll { site, creds, auth } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            let session = authenticate(&station, &mut client, &auth).map_err(protocol)?;
            let (token, _) =
                visit_page(&station, &mut client, session, &site, "login").map_err(protocol)?;
            let pairs: Vec<(&str, &str)> =
                creds.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            let mut ch = station.sim.channel(CLIENT_ADDR);
            let (ok, detail) = client
                .enroll(&mut ch, session, token, &pairs)
                .map_err(|e| protocol(format!("enroll: {}", describe(&e))))?;
            station.checkpoint(&client).map_err(usage)?;
            if ok {
                println!("enrolled at {site}: {detail}");
                Ok(())
            } else {
                Err(protocol(format!("enrollment refused: {detail}")))
            }
        }
        Command::Submit { site, auth } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            let session = authenticate(&station, &mut client, &auth).map_err(protocol)?;
            let (token, _) =
                visit_page(&station, &mut client, session, &site, "login").map_err(protocol)?;
            let mut ch = station.sim.channel(CLIENT_ADDR);
            let (ok, detail) = client
                .submit(&mut ch, session, token)
                .map_err(|e| protocol(format!("submit: {}", describe(&e))))?;
            station.checkpoint(&client).map_err(usage)?;
            if ok {
                println!("{site} accepted the login: {detail}");
                Ok(())
            } else {
                Err(protocol(format!("{site} refused the login: {detail}")))
            }
        }
        Command::Update { site, creds, auth } => {
            let station = Station::open(&cli.state).map_err(usage)?;
            station.boot().map_err(usage)?;
            let mut client = station.client().map_err(usage)?;
            let session = authenticate(&station, &mut client, &auth).map_err(protocol)?;
            let (token, _) =
                visit_page(&station, &mut client, session, &site, "update").map_err(protocol)?;
            let pairs: Vec<(&str, &str)> =
                creds.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            let mut ch = station.sim.channel(CLIENT_ADDR);
            let (ok, detail) = client
                .update(&mut ch, session, token, &pairs)
                .map_err(|e| protocol(format!("update: {}", describe(&e))))?;
            station.checkpoint(&client).map_err(usage)?;
            if ok {
                println!("{site} accepted the update: {detail}");
                Ok(())
            } else {
                Err(protocol(format!("{site} refused the update: {detail}")))
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
