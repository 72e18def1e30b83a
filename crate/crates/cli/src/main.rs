//! `tilebase` operator tool.
//!
//! Every command prints one JSON document on stdout (CSV for `bench`).
//! Failures print `{"error": kind, "message": ...}` on stderr and exit
//! nonzero: 2 for usage errors, 1 for everything else.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tilebase::cluster::{socket_client, stop_socket_cluster, ClusterConfig, ClusterError, Mode, SimCluster, SocketCluster, TrustRoot};
use tilebase::frontend::{FrontEnd, FrontendError, RangeQuery};
use tilebase::geodata::{parse_features, FilterMode, GeoFeature};
use tilebase::gtfs::{ingest_gtfs, GtfsFeed};
use tilebase::icn::{socket, Substrate};
use tilebase::perfmodel::bench::{bench_run, write_csv, Scenario};
use tilebase::trust::Credentials;
use tilebase::wire::Frame;
use tilebase::BoundingBox;

const DEFAULT_DATA_DIR: &str = "tilebase-data";
const STATE_FILE: &str = "cli-state.json";

#[derive(Parser)]
#[command(name = "tilebase", version, about = "Operate a tile-addressed geo-spatial store")]
struct Cli {
    /// Cluster config JSON; defaults to a single sim-mode engine.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Engine stores and CLI state; overrides the config's dataDir.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Key store; defaults to the config's trustAnchor, else <data-dir>/keystore.json.
    #[arg(long, global = true)]
    keystore: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start or stop a deployment.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Manage the administrator key and the principals it issued.
    #[command(subcommand)]
    Keys(KeysCmd),
    /// Insert GeoJSON features (Feature, FeatureCollection or array) as the users named in them.
    Insert { file: PathBuf },
    /// Remove GeoJSON features.
    Remove { file: PathBuf },
    /// Range-query one collection.
    Query(QueryArgs),
    /// Show the constrained tessellation of a box.
    Tessellate {
        /// minLng,minLat,maxLng,maxLat
        #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
        bbox: BoundingBox,
        #[arg(long, default_value_t = tilebase::frontend::DEFAULT_K)]
        k: usize,
    },
    /// Run a timing-model scenario in simulation and print CSV.
    Bench { scenario: PathBuf },
    /// Counters of the global Bloom filter server.
    BfStats,
    /// Index the stops of a GTFS feed (directory or zip) as one MultiPoint.
    IngestGtfs {
        feed: PathBuf,
        /// Public URL of the feed, stored in the URL property.
        #[arg(long)]
        url: String,
        #[arg(long)]
        tenant: String,
        #[arg(long, default_value = "gtfs")]
        collection: String,
        #[arg(long)]
        user: String,
    },
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Sim mode: initialize the data directory. Socket mode: serve until stopped.
    Start,
    /// Socket mode: ask a running deployment to shut down.
    Stop,
}

#[derive(Subcommand)]
enum KeysCmd {
    /// Create a key store with a fresh administrator key.
    Init {
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing key store.
        #[arg(long)]
        force: bool,
    },
    IssueTenant { tid: String },
    IssueUser { tid: String, uid: String },
    /// List issued principals.
    List,
}

#[derive(Args)]
struct QueryArgs {
    /// minLng,minLat,maxLng,maxLat
    #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
    bbox: BoundingBox,
    #[arg(long, default_value = "intersect", value_parser = parse_mode)]
    mode: FilterMode,
    #[arg(long, default_value_t = tilebase::frontend::DEFAULT_K)]
    k: usize,
    /// Skip tiles the global Bloom filter reports empty.
    #[arg(long)]
    bf: bool,
    /// Defaults to the tenant of the last insert.
    #[arg(long)]
    tenant: Option<String>,
    #[arg(long)]
    collection: Option<String>,
    #[arg(long)]
    user: Option<String>,
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    let [a, b, c, d] = v[..] else { return Err(format!("expected 4 comma-separated numbers, got {}", v.len())) };
    BoundingBox::from_coords(a, b, c, d).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<FilterMode, String> {
    s.parse::<FilterMode>().map_err(|e| e.to_string())
}

struct Failure {
    kind: &'static str,
    message: String,
    detail: Option<Value>,
}

impl Failure {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into(), detail: None }
    }

    fn with(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    fn exit_code(&self) -> u8 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }
}

impl From<ClusterError> for Failure {
    fn from(e: ClusterError) -> Self {
        let kind = match e {
            ClusterError::Config(_) | ClusterError::UnknownEngine(_) => "config",
            ClusterError::Network(_) => "network",
            ClusterError::Io(_) => "io",
            ClusterError::Trust(_) => "trust",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<FrontendError> for Failure {
    fn from(e: FrontendError) -> Self {
        let kind = match &e {
            FrontendError::Unauthorized(_) => "unauthorized",
            FrontendError::Invalid(_) | FrontendError::Geo(_) => "invalid",
            FrontendError::PartialResult { .. } => "partial-result",
            FrontendError::Unroutable(_) => "unroutable",
            FrontendError::Network(_) => "network",
            FrontendError::Tessellation(_) => "tessellation",
        };
        let f = Failure::new(kind, e.to_string());
        match e {
            FrontendError::PartialResult { report } => f.with(serde_json::to_value(&report).unwrap_or_default()),
            _ => f,
        }
    }
}

type Outcome<T = Value> = Result<T, Failure>;

/// Query defaults remembered from the last write.
#[derive(Default, Serialize, Deserialize)]
struct CliState {
    tenant: Option<String>,
    collection: Option<String>,
    user: Option<String>,
}

struct Context {
    config: ClusterConfig,
    data_dir: PathBuf,
    keystore: PathBuf,
}

impl Context {
    fn resolve(cli: &Cli) -> Outcome<Self> {
        let mut config = match &cli.config {
            Some(p) => ClusterConfig::load(p).map_err(|e| Failure::new("usage", e.to_string()))?,
            None => ClusterConfig::single_engine(),
        };
        let data_dir = cli.data_dir.clone().or_else(|| config.data_dir.clone()).unwrap_or_else(|| DEFAULT_DATA_DIR.into());
        config.data_dir = Some(data_dir.clone());
        let keystore = cli.keystore.clone().or_else(|| config.trust_anchor.clone()).unwrap_or_else(|| data_dir.join("keystore.json"));
        Ok(Context { config, data_dir, keystore })
    }

    fn trust(&self, create: bool) -> Outcome<TrustRoot> {
        if self.keystore.exists() {
            return Ok(TrustRoot::load(&self.keystore)?);
        }
        if !create {
            return Err(Failure::new("trust", format!("no key store at {}; run `keys init`", self.keystore.display())));
        }
        let t = TrustRoot::from_seed(self.config.seed.unwrap_or(1));
        t.save(&self.keystore)?;
        Ok(t)
    }

    fn state(&self) -> CliState {
        std::fs::read(self.data_dir.join(STATE_FILE)).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default()
    }

    fn save_state(&self, s: &CliState) -> Outcome<()> {
        std::fs::create_dir_all(&self.data_dir).map_err(io_failure)?;
        std::fs::write(self.data_dir.join(STATE_FILE), serde_json::to_vec_pretty(s).expect("state serializes")).map_err(io_failure)
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new("io", e.to_string())
}

/// Where front-end operations run.
enum Backend {
    Sim(Box<SimCluster>),
    Socket { config: ClusterConfig, trust: TrustRoot },
}

impl Backend {
    fn open(ctx: &Context, trust: TrustRoot) -> Outcome<Self> {
        Ok(match ctx.config.mode {
            Mode::Sim => Backend::Sim(Box::new(SimCluster::with_trust(ctx.config.clone(), trust)?)),
            Mode::Socket => Backend::Socket { config: ctx.config.clone(), trust },
        })
    }

    fn trust(&self) -> &TrustRoot {
        match self {
            Backend::Sim(c) => &c.trust,
            Backend::Socket { trust, .. } => trust,
        }
    }

    /// Credentials of a user, issued on first use.
    fn user(&mut self, tid: &str, uid: &str, issue: bool) -> Outcome<Arc<Credentials>> {
        if let Some(c) = self.trust().user(tid, uid) {
            return Ok(Arc::new(c.clone()));
        }
        if !issue {
            return Err(Failure::new("trust", format!("user {uid} of tenant {tid} is not in the key store")));
        }
        Ok(match self {
            Backend::Sim(c) => c.issue_user(tid, uid)?,
            Backend::Socket { trust, .. } => Arc::new(trust.issue_user(tid, uid)?),
        })
    }

    fn run<T>(&mut self, creds: Arc<Credentials>, op: impl FnOnce(&mut FrontEnd, &mut dyn Substrate) -> Result<T, FrontendError>) -> Outcome<T> {
        match self {
            Backend::Sim(c) => {
                let mut fe = c.frontend(creds);
                let r = op(&mut fe, &mut c.endpoint());
                c.net.run_until_idle();
                Ok(r?)
            }
            Backend::Socket { config, trust } => {
                let mut client = socket_client(config, &creds, trust)?;
                let bf = config.bf_server.as_ref().map(|b| b.address.clone());
                let mut fe = FrontEnd::new(creds, trust.validator(), bf);
                Ok(op(&mut fe, &mut client)?)
            }
        }
    }

    fn bf_stats(&mut self) -> Outcome {
        let reply = match self {
            Backend::Sim(c) => {
                let bf = c.bf.ok_or_else(|| Failure::new("config", "no bfServer configured"))?;
                let client = c.client;
                c.net.call(client, bf, Frame::Stats).map_err(|e| Failure::new("network", e.to_string()))?
            }
            Backend::Socket { config, .. } => {
                let addr = &config.bf_server.as_ref().ok_or_else(|| Failure::new("config", "no bfServer configured"))?.address;
                socket::call(addr, Frame::Stats, Duration::from_secs(10)).map_err(|e| Failure::new("network", e.to_string()))?
            }
        };
        match reply {
            Frame::StatsReply { stats } => Ok(stats),
            other => Err(Failure::new("network", format!("unexpected reply {other:?}"))),
        }
    }

    /// Persists engine stores and the key store.
    fn close(self, ctx: &Context) -> Outcome<()> {
        match self {
            Backend::Sim(mut c) => {
                for id in c.engine_ids() {
                    c.stop_engine(&id)?;
                }
                c.trust.save(&ctx.keystore)?;
            }
            Backend::Socket { trust, .. } => trust.save(&ctx.keystore)?,
        }
        Ok(())
    }
}

fn read_features(path: &Path) -> Outcome<Vec<GeoFeature>> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    parse_features(&bytes).map_err(|e| Failure::new("invalid", format!("{}: {e}", path.display())))
}

/// Features grouped by owning (tenant, user), in first-seen order.
fn by_owner(features: Vec<GeoFeature>) -> Vec<((String, String), Vec<GeoFeature>)> {
    let mut groups: Vec<((String, String), Vec<GeoFeature>)> = Vec::new();
    for f in features {
        let key = (f.tid(), f.uid());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(f),
            None => groups.push((key, vec![f])),
        }
    }
    groups
}

fn write_features(ctx: &Context, features: Vec<GeoFeature>, remove: bool) -> Outcome {
    let count = features.len();
    let last = features.last().map(|f| (f.tid(), f.cid(), f.uid()));
    let mut backend = Backend::open(ctx, ctx.trust(true)?)?;
    let mut writes = Vec::new();
    let mut ok = true;
    let mut failure = None;
    for ((tid, uid), group) in by_owner(features) {
        let creds = match backend.user(&tid, &uid, !remove) {
            Ok(c) => c,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let r = backend.run(creds, |fe, sub| {
            if remove {
                let mut all = tilebase::frontend::WriteReport::default();
                for f in &group {
                    let r = fe.remove(sub, f)?;
                    all.engines.extend(r.engines);
                    all.resolutions += r.resolutions;
                    all.errors.extend(r.errors);
                }
                Ok(all)
            } else {
                fe.insert_batch(sub, &group)
            }
        });
        match r {
            Ok(r) => {
                ok &= r.all_ok();
                writes.push(json!({"tid": tid, "uid": uid, "features": group.len(), "report": r}));
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    backend.close(ctx)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let (false, Some((tid, cid, uid))) = (remove, last) {
        ctx.save_state(&CliState { tenant: Some(tid), collection: Some(cid), user: Some(uid) })?;
    }
    let out = json!({"features": count, "ok": ok, "writes": writes});
    if ok {
        Ok(out)
    } else {
        Err(Failure::new("write-failed", "some items were not stored").with(out))
    }
}

fn query(ctx: &Context, a: &QueryArgs) -> Outcome {
    let st = ctx.state();
    let pick = |flag: &Option<String>, remembered: &Option<String>, what: &str| {
        flag.clone().or_else(|| remembered.clone()).ok_or_else(|| Failure::new("usage", format!("--{what} is required before the first insert")))
    };
    let tid = pick(&a.tenant, &st.tenant, "tenant")?;
    let cid = pick(&a.collection, &st.collection, "collection")?;
    // A remembered user only applies to its own tenant.
    let remembered_user = if st.tenant.as_deref() == Some(tid.as_str()) { st.user.clone() } else { None };
    let uid = pick(&a.user, &remembered_user, "user")?;
    let mut backend = Backend::open(ctx, ctx.trust(false)?)?;
    let r = backend
        .user(&tid, &uid, false)
        .and_then(|creds| backend.run(creds, |fe, sub| fe.range_query(sub, &RangeQuery::new(a.bbox, a.mode, &tid, &cid).with_k(a.k).with_bf(a.bf))));
    backend.close(ctx)?;
    Ok(serde_json::to_value(r?).expect("report serializes"))
}

fn tessellate(bbox: &BoundingBox, k: usize) -> Outcome {
    let (t, tiles) = FrontEnd::tessellate(bbox, k)?;
    let prefixes: Vec<String> = tiles.iter().map(|t| tilebase::naming::tile_prefix(t).to_string()).collect();
    Ok(json!({
        "k": k,
        "tiles": prefixes.len(),
        "levels": t.level_counts(),
        "stretch": t.stretch,
        "constraintViolated": t.constraint_violated,
        "prefixes": prefixes,
    }))
}

fn keys(ctx: &Context, cmd: &KeysCmd) -> Outcome {
    match cmd {
        KeysCmd::Init { seed, force } => {
            if ctx.keystore.exists() && !force {
                return Err(Failure::new("usage", format!("{} exists; pass --force to replace it", ctx.keystore.display())));
            }
            let t = TrustRoot::from_seed(seed.or(ctx.config.seed).unwrap_or(1));
            t.save(&ctx.keystore)?;
            Ok(json!({"keystore": ctx.keystore, "admin": t.admin.identity().to_string()}))
        }
        KeysCmd::IssueTenant { tid } => {
            let mut t = ctx.trust(true)?;
            let c = t.tenant(tid)?;
            t.save(&ctx.keystore)?;
            Ok(json!({"identity": c.identity().to_string()}))
        }
        KeysCmd::IssueUser { tid, uid } => {
            let mut t = ctx.trust(true)?;
            let c = match t.user(tid, uid) {
                Some(c) => c.clone(),
                None => t.issue_user(tid, uid)?,
            };
            t.save(&ctx.keystore)?;
            Ok(json!({"identity": c.identity().to_string()}))
        }
        KeysCmd::List => {
            let t = ctx.trust(false)?;
            let tenants: Vec<String> = t.tenants().map(|c| c.identity().to_string()).collect();
            let users: Vec<String> = t.users().map(|c| c.identity().to_string()).collect();
            Ok(json!({"admin": t.admin.identity().to_string(), "tenants": tenants, "users": users}))
        }
    }
}

fn cluster(ctx: &Context, cmd: &ClusterCmd) -> Outcome {
    match (cmd, ctx.config.mode) {
        (ClusterCmd::Start, Mode::Sim) => {
            let backend = Backend::open(ctx, ctx.trust(true)?)?;
            let engines = match &backend {
                Backend::Sim(c) => c.engine_ids(),
                Backend::Socket { .. } => unreachable!(),
            };
            backend.close(ctx)?;
            Ok(json!({"mode": "sim", "dataDir": ctx.data_dir, "engines": engines}))
        }
        (ClusterCmd::Start, Mode::Socket) => {
            let mut trust = ctx.trust(true)?;
            let c = SocketCluster::start(ctx.config.clone(), &mut trust)?;
            trust.save(&ctx.keystore)?;
            let engines: BTreeMap<&str, String> = ctx.config.engines.iter().map(|e| (e.id.as_str(), e.address.to_string())).collect();
            emit(&json!({"mode": "socket", "router": ctx.config.router.to_string(), "engines": engines, "status": "running"}).to_string());
            c.wait()?;
            Ok(json!({"status": "stopped"}))
        }
        (ClusterCmd::Stop, Mode::Socket) => {
            stop_socket_cluster(&ctx.config)?;
            Ok(json!({"status": "stopping"}))
        }
        (ClusterCmd::Stop, Mode::Sim) => Ok(json!({"mode": "sim", "status": "nothing to stop"})),
    }
}

fn bench(ctx: &Context, path: &Path, explicit_config: bool) -> Outcome<String> {
    let s = Scenario::load(path).map_err(|e| Failure::new("usage", e.to_string()))?;
    let base = explicit_config.then_some(&ctx.config);
    let rows = bench_run(&s, base).map_err(|e| Failure::new("bench", e.to_string()))?;
    let mut out = Vec::new();
    write_csv(&rows, &mut out).map_err(|e| Failure::new("io", e.to_string()))?;
    Ok(String::from_utf8(out).expect("csv is utf-8"))
}

fn ingest(ctx: &Context, feed: &Path, url: &str, tid: &str, cid: &str, uid: &str) -> Outcome {
    let ing = ingest_gtfs(&GtfsFeed { source: feed.into(), url: url.into() }, tid, cid, uid).map_err(|e| Failure::new("invalid", e.to_string()))?;
    let oid = ing.feature.oid();
    let mut out = write_features(ctx, vec![ing.feature], false)?;
    out["oid"] = json!(oid);
    out["stops"] = json!(ing.stops);
    out["warnings"] = serde_json::to_value(&ing.warnings).expect("warnings serialize");
    Ok(out)
}

fn run(cli: &Cli) -> Outcome<String> {
    let ctx = Context::resolve(cli)?;
    let value = match &cli.command {
        Command::Cluster(c) => cluster(&ctx, c)?,
        Command::Keys(k) => keys(&ctx, k)?,
        Command::Insert { file } => write_features(&ctx, read_features(file)?, false)?,
        Command::Remove { file } => write_features(&ctx, read_features(file)?, true)?,
        Command::Query(q) => query(&ctx, q)?,
        Command::Tessellate { bbox, k } => tessellate(bbox, *k)?,
        Command::Bench { scenario } => return bench(&ctx, scenario, cli.config.is_some()),
        Command::BfStats => {
            let mut b = Backend::open(&ctx, ctx.trust(true)?)?;
            let s = b.bf_stats();
            b.close(&ctx)?;
            s?
        }
        Command::IngestGtfs { feed, url, tenant, collection, user } => ingest(&ctx, feed, url, tenant, collection, user)?,
    };
    Ok(serde_json::to_string_pretty(&value).expect("output serializes"))
}

/// Writes a line to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", text.trim_end()).and_then(|_| out.flush());
}

fn fail(f: Failure) -> ExitCode {
    let code = ExitCode::from(f.exit_code());
    let mut v = json!({"error": f.kind, "message": f.message});
    if let Some(d) = f.detail {
        v["detail"] = d;
    }
    eprintln!("{v}");
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::new("usage", e.render().to_string().trim_end())),
    };
    match run(&cli) {
        Ok(out) => {
            emit(&out);
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}
