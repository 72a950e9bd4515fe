//! `ssiot` command-line front end: KMS and FaaS servers, app toolchain, hub
//! runtime and benchmarks.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rust_decimal::Decimal;
use serde::Deserialize;

use ssiot_core::bench::{self, Experiment};
use ssiot_core::envelope::AppId;
use ssiot_core::faas_sim::http::{spawn_faas_server, HttpFaasClient};
use ssiot_core::faas_sim::{
    default_catalog, BehaviorRef, FaasEndpoint, KmsIdentity, Platform, PlatformConfig, PlatformHandle,
};
use ssiot_core::hub::{AppBinding, DeviceClass, DeviceEvent, HubConfig, HubSim, OffloadPolicy, PolicyKind};
use ssiot_core::kms::http::spawn_kms_server;
use ssiot_core::kms::{AuditFilter, HttpKmsClient, Kms, KmsClient, KmsConfig};
use ssiot_core::rules::{parse_rules, NotificationSink, RuleEngine};
use ssiot_core::tls::{install_default_provider, TlsMaterial};
use ssiot_core::toolchain::{
    deploy_app, keystore_path, package_app, provision_app, provision_path, read_json, receipt_path, write_json,
    DeploymentReceipt, HubKeyStore, ProvisionRecord,
};

/// Environment variable holding the hub key store secret (at least 16 bytes).
const SECRET_ENV: &str = "SSIOT_HUB_SECRET";

#[derive(Parser)]
#[command(name = "ssiot", version, about = "Private IoT offloading toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key management service.
    #[command(subcommand)]
    Kms(KmsCmd),
    /// FaaS platform emulator.
    #[command(subcommand)]
    Faas(FaasCmd),
    /// App provisioning and deployment.
    #[command(subcommand)]
    App(AppCmd),
    /// Hub runtime.
    #[command(subcommand)]
    Hub(HubCmd),
    /// Run an experiment and write its report.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct KmsConn {
    /// KMS base URL.
    #[arg(long = "kms", env = "SSIOT_KMS_URL", default_value = "https://localhost:8443")]
    url: String,
    /// Extra trusted root certificate (PEM) for the KMS.
    #[arg(long, env = "SSIOT_KMS_CA")]
    ca: Option<PathBuf>,
}

impl KmsConn {
    fn client(&self) -> Result<HttpKmsClient> {
        kms_client(&self.url, self.ca.as_deref())
    }
}

#[derive(Subcommand)]
enum KmsCmd {
    /// Serve the HTTPS API until interrupted.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Revoke an app; later decrypt requests are denied.
    Revoke {
        app_id: String,
        #[command(flatten)]
        conn: KmsConn,
    },
    /// Print audit records as JSON lines.
    Audit {
        #[arg(long)]
        app: Option<String>,
        /// Keep polling for new records.
        #[arg(long)]
        follow: bool,
        #[command(flatten)]
        conn: KmsConn,
    },
}

#[derive(Subcommand)]
enum FaasCmd {
    /// Serve the emulator over HTTP until interrupted.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AppCmd {
    /// Generate app keys, register them at the KMS and store them locally.
    Provision {
        app_id: String,
        #[command(flatten)]
        conn: KmsConn,
        #[arg(long, default_value = "ssiot-state")]
        state_dir: PathBuf,
    },
    /// Package a provisioned app and deploy it to the platform.
    Deploy {
        app_id: String,
        /// Workload profile name (see `default_catalog`).
        #[arg(long, conflicts_with = "native")]
        profile: Option<String>,
        /// Built-in native function instead of a profile.
        #[arg(long)]
        native: Option<String>,
        #[arg(long, default_value = "3.0")]
        memory: Decimal,
        #[arg(long = "faas", env = "SSIOT_FAAS_URL", default_value = "http://127.0.0.1:8080")]
        faas: String,
        #[arg(long, default_value = "ssiot-state")]
        state_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum HubCmd {
    /// Replay a device event trace through the hub.
    Run(HubRunArgs),
}

#[derive(Args)]
struct HubRunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Monthly budget for `budget-cap`.
    #[arg(long)]
    budget: Option<Decimal>,
    #[arg(long)]
    device: Option<DeviceClass>,
    /// Device events as JSON lines; overrides `events` in the config.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Event log destination (JSON lines); stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    experiment: Experiment,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FaasServeConfig {
    listen_address: Option<String>,
    kms_url: Option<String>,
    kms_ca: Option<PathBuf>,
    /// Delay responses by the emulated latency.
    real_time: bool,
    platform: PlatformConfig,
}

#[derive(Debug, Deserialize)]
struct HubAppConfig {
    app_id: String,
    profile: String,
    #[serde(default)]
    devices: Vec<String>,
    #[serde(default)]
    item_id: Option<String>,
    #[serde(default)]
    source_device: Option<String>,
    #[serde(default)]
    keep_alive: bool,
    #[serde(default = "default_memory")]
    memory_gb: Decimal,
}

fn default_memory() -> Decimal {
    Decimal::new(3, 0)
}

#[derive(Debug, Deserialize)]
struct HubFile {
    #[serde(flatten)]
    hub: HubConfig,
    #[serde(default = "default_state_dir")]
    state_dir: PathBuf,
    #[serde(default)]
    kms_ca: Option<PathBuf>,
    #[serde(default)]
    events: Option<PathBuf>,
    #[serde(default)]
    notifications: Option<PathBuf>,
    #[serde(default)]
    webhook: Option<String>,
    #[serde(default)]
    apps: Vec<HubAppConfig>,
}

fn default_state_dir() -> PathBuf {
    PathBuf::from("ssiot-state")
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn kms_client(url: &str, ca: Option<&Path>) -> Result<HttpKmsClient> {
    let pem = ca
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    Ok(HttpKmsClient::new(url, pem.as_deref())?)
}

fn open_keystore(state_dir: &Path) -> Result<HubKeyStore> {
    let secret = std::env::var(SECRET_ENV).with_context(|| format!("{SECRET_ENV} must be set"))?;
    Ok(HubKeyStore::open(&keystore_path(state_dir), secret.as_bytes())?)
}

fn wait_for_interrupt() -> Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(tokio::signal::ctrl_c())?;
    Ok(())
}

fn parse_addr(s: &str) -> Result<SocketAddr> {
    s.parse().with_context(|| format!("invalid listen address {s}"))
}

fn kms_serve(config: Option<&Path>) -> Result<()> {
    let cfg: KmsConfig = match config {
        Some(p) => read_toml(p)?,
        None => KmsConfig::default(),
    };
    let tls = match (&cfg.tls_cert, &cfg.tls_key, &cfg.state_dir) {
        (Some(c), Some(k), _) => TlsMaterial::load_or_create(c, k)?,
        (None, None, Some(dir)) => {
            fs::create_dir_all(dir)?;
            TlsMaterial::load_or_create(&dir.join("kms_cert.pem"), &dir.join("kms_key.pem"))?
        }
        (None, None, None) => {
            let m = TlsMaterial::localhost()?;
            eprintln!("ephemeral certificate:\n{}", m.cert_pem);
            m
        }
        _ => bail!("tls_cert and tls_key must be given together"),
    };
    let addr = parse_addr(&cfg.listen_address)?;
    let kms = Arc::new(Kms::from_config(cfg)?);
    let server = spawn_kms_server(kms.clone(), addr, &tls)?;
    tracing::info!(kms_id = %kms.kms_id(), url = %server.url(), "KMS listening");
    wait_for_interrupt()?;
    server.shutdown();
    Ok(())
}

fn kms_audit(app: Option<String>, follow: bool, conn: &KmsConn) -> Result<()> {
    let client = conn.client()?;
    let mut last_seq = 0;
    let stdout = std::io::stdout();
    loop {
        let filter = AuditFilter {
            app_id: app.clone(),
            ..AuditFilter::default()
        };
        let mut out = stdout.lock();
        let since = last_seq;
        for rec in client.query_audit(&filter)?.into_iter().filter(|r| r.seq > since) {
            last_seq = rec.seq;
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        out.flush()?;
        if !follow {
            return Ok(());
        }
        std::thread::sleep(Duration::from_secs(1));
    }
}

fn faas_serve(config: Option<&Path>) -> Result<()> {
    let cfg: FaasServeConfig = match config {
        Some(p) => read_toml(p)?,
        None => FaasServeConfig::default(),
    };
    let mut platform = Platform::new(cfg.platform.clone());
    if let Some(url) = &cfg.kms_url {
        let client: Arc<dyn KmsClient> = Arc::new(kms_client(url, cfg.kms_ca.as_deref())?);
        let id = platform.connect_kms(client)?;
        tracing::info!(kms_id = %id, "connected to KMS");
    }
    let addr = parse_addr(cfg.listen_address.as_deref().unwrap_or("127.0.0.1:8080"))?;
    let server = spawn_faas_server(PlatformHandle::spawn(platform), addr, cfg.real_time)?;
    tracing::info!(url = %server.url(), "FaaS emulator listening");
    wait_for_interrupt()?;
    server.shutdown();
    Ok(())
}

fn app_provision(app_id: &str, conn: &KmsConn, state_dir: &Path) -> Result<()> {
    let app_id = AppId::new(app_id.to_string())?;
    let mut store = open_keystore(state_dir)?;
    let (_, record) = provision_app(&app_id, &conn.client()?, &mut store)?;
    write_json(&provision_path(state_dir, &app_id), &record)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

fn app_deploy(
    app_id: &str,
    behavior: BehaviorRef,
    memory: Decimal,
    faas: &str,
    state_dir: &Path,
) -> Result<DeploymentReceipt> {
    let app_id = AppId::new(app_id.to_string())?;
    let record: ProvisionRecord = read_json(&provision_path(state_dir, &app_id))
        .with_context(|| format!("{app_id} is not provisioned under {}", state_dir.display()))?;
    let pair = open_keystore(state_dir)?
        .get(&app_id)?
        .with_context(|| format!("no key pair for {app_id} in the key store"))?;
    let package = package_app(
        &app_id,
        behavior,
        KmsIdentity {
            kms_id: record.kms.kms_id.clone(),
            endpoint: record.kms.endpoint.clone(),
        },
        &pair.private,
        memory,
    )?;
    let client = HttpFaasClient::new(faas)?;
    Ok(deploy_app(&package, &client, Some(state_dir), now_ms())?)
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn read_events(path: &Path) -> Result<Vec<DeviceEvent>> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut events = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str::<DeviceEvent>(&line)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?,
        );
    }
    events.sort_by_key(|e| e.arrived_at);
    Ok(events)
}

fn hub_run(args: &HubRunArgs) -> Result<()> {
    let mut file: HubFile = read_toml(&args.config)?;
    if let Some(kind) = args.policy {
        file.hub.policy = match kind {
            PolicyKind::BudgetCap => {
                let budget = args
                    .budget
                    .or(file.hub.policy.monthly_budget_usd)
                    .context("budget-cap needs --budget")?;
                OffloadPolicy::budget_cap(budget)?
            }
            PolicyKind::Balanced => OffloadPolicy::balanced(file.hub.policy.balance_weight)?,
            other => OffloadPolicy::new(other),
        };
    } else if let Some(b) = args.budget {
        file.hub.policy.monthly_budget_usd = Some(b);
    }
    if let Some(d) = &args.device {
        file.hub.device_class = d.clone();
    }
    let kms_url = file.hub.kms_url.clone().context("kms_url is required")?;
    let kms: Arc<dyn KmsClient> = Arc::new(kms_client(&kms_url, file.kms_ca.as_deref())?);
    let faas: Option<Arc<dyn FaasEndpoint>> = match &file.hub.faas_endpoint {
        Some(url) => Some(Arc::new(HttpFaasClient::new(url)?)),
        None => None,
    };
    let log: Box<dyn Write + Send> = match &args.log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    let mut sink = match &file.notifications {
        Some(p) => NotificationSink::to_file(p)?,
        None => NotificationSink::memory(),
    };
    if let Some(url) = &file.webhook {
        sink = sink.with_webhook(url)?;
    }
    let mut hub = HubSim::new(file.hub.clone(), kms.clone(), faas)?
        .with_sink(sink)
        .with_log_writer(log);
    if let Some(p) = &args.rules {
        let source = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        hub = hub.with_rules(RuleEngine::new(parse_rules(&source)?));
    }
    let kms_public = kms.get_public_key()?;
    let store = open_keystore(&file.state_dir)?;
    let catalog = default_catalog();
    for a in &file.apps {
        let app_id = AppId::new(a.app_id.clone())?;
        let pair = store
            .get(&app_id)?
            .with_context(|| format!("{app_id} is not provisioned under {}", file.state_dir.display()))?;
        let receipt: Option<DeploymentReceipt> = read_json(&receipt_path(&file.state_dir, &app_id)).ok();
        let profile = catalog
            .get(&a.profile)
            .cloned()
            .with_context(|| format!("unknown profile {}", a.profile))?;
        hub.add_app(AppBinding {
            app: pair,
            kms_public: kms_public.clone(),
            profile,
            function_id: receipt.map(|r| r.function_id),
            memory_gb: a.memory_gb,
            item_id: a.item_id.clone(),
            source_device: a.source_device.clone(),
            keep_alive: a.keep_alive,
        });
        for d in &a.devices {
            hub.route_device(d, &app_id);
        }
    }
    let events_path = args.events.clone().or(file.events.clone());
    if let Some(p) = events_path {
        for e in read_events(&p)? {
            hub.ingest(e)?;
        }
    }
    hub.drain()?;
    let outcomes: Vec<_> = hub.outcomes().collect();
    let completed = outcomes.iter().filter(|o| o.error.is_none()).count();
    eprintln!(
        "requests={} completed={} keep_alives={} spend_usd={} notifications={}",
        outcomes.len(),
        completed,
        hub.keep_alive_count(),
        hub.month_spend(),
        hub.notifications().len()
    );
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => Some(serde_json::to_value(read_toml::<toml::Value>(p)?)?),
        None => None,
    };
    let report = bench::run(args.experiment, config)?;
    fs::write(&args.out, report.to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(csv) = &args.csv {
        report.write_csv(fs::File::create(csv)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    install_default_provider();
    let cli = Cli::parse();
    match cli.command {
        Command::Kms(KmsCmd::Serve { config }) => kms_serve(config.as_deref()),
        Command::Kms(KmsCmd::Revoke { app_id, conn }) => {
            let ack = conn.client()?.revoke_app(&AppId::new(app_id)?)?;
            println!("{}", serde_json::to_string_pretty(&ack)?);
            Ok(())
        }
        Command::Kms(KmsCmd::Audit { app, follow, conn }) => kms_audit(app, follow, &conn),
        Command::Faas(FaasCmd::Serve { config }) => faas_serve(config.as_deref()),
        Command::App(AppCmd::Provision { app_id, conn, state_dir }) => app_provision(&app_id, &conn, &state_dir),
        Command::App(AppCmd::Deploy {
            app_id,
            profile,
            native,
            memory,
            faas,
            state_dir,
        }) => {
            let behavior = match (profile, native) {
                (Some(p), None) => BehaviorRef::Profile(p),
                (None, Some(n)) => BehaviorRef::Native(n),
                _ => bail!("give exactly one of --profile or --native"),
            };
            let receipt = app_deploy(&app_id, behavior, memory, &faas, &state_dir)?;
            println!("{}", serde_json::to_string_pretty(&receipt)?);
            Ok(())
        }
        Command::Hub(HubCmd::Run(args)) => hub_run(&args),
        Command::Bench(args) => run_bench(&args),
    }
}
