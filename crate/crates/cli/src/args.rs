use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voxmat::mtd::MaterialTriplet;

#[derive(Debug, Parser)]
#[command(name = "voxmat", version, about = "Material-aware voxelization and material field tools", args_override_self = true)]
pub struct Cli {
    /// JSON object of flag values for the subcommand; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Material range database and triplet lists.
    #[command(subcommand)]
    Mtd(MtdCmd),
    /// Train and query the material autoencoder.
    #[command(subcommand)]
    Matvae(MatvaeCmd),
    /// Solid voxelization of meshes and Gaussian splats.
    #[command(subcommand)]
    Voxelize(VoxelizeCmd),
    /// Average multi-view feature maps onto voxel centers.
    Lift(LiftArgs),
    /// Train a feature-to-material head and predict material fields.
    #[command(subcommand)]
    Field(FieldCmd),
    /// Error metrics, mass estimates and distribution distances.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Pointwise hyperelastic energy and stress.
    #[command(subcommand)]
    Elasticity(ElasticityCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct OutFile {
    /// Output path; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MtdCmd {
    /// Draw triplets from every range, proportionally to range size.
    Sample {
        /// Range database JSON; the bundled reference ranges when omitted.
        #[arg(long)]
        ranges: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        total: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        out: OutFile,
    },
    /// Drop triplets equal to an earlier one at six significant digits.
    Dedupe {
        input: PathBuf,
        #[command(flatten)]
        out: OutFile,
    },
    /// Distance of every triplet from the closest range.
    Validate {
        input: PathBuf,
        #[arg(long)]
        ranges: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[command(flatten)]
        out: OutFile,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    Mws,
    Stratified,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub kl_anneal_epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub estimator: Option<Estimator>,
}

#[derive(Debug, Subcommand)]
pub enum MatvaeCmd {
    /// Fit a model to a triplet CSV.
    Train {
        input: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Checkpoint path.
        #[arg(long, short)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Latent codes (flowed posterior means) of a triplet CSV.
    Encode {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        #[command(flatten)]
        out: OutFile,
    },
    /// Triplets decoded from a latent CSV with header `z0,z1`.
    Decode {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        #[command(flatten)]
        out: OutFile,
    },
    /// Evenly spaced points between two materials, through the latent space or raw values.
    Interp {
        #[arg(long, required_unless_present = "naive")]
        model: Option<PathBuf>,
        /// Start material as `E,nu,rho`.
        #[arg(long, value_parser = parse_triplet)]
        from: MaterialTriplet,
        /// End material as `E,nu,rho`.
        #[arg(long, value_parser = parse_triplet)]
        to: MaterialTriplet,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Interpolate raw property values instead of latent codes.
        #[arg(long)]
        naive: bool,
        #[command(flatten)]
        out: OutFile,
    },
    /// Decode standard-normal latent draws.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        out: OutFile,
    },
    /// Reconstruction error and validity of encoded-then-decoded triplets.
    ReconstructReport {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        #[arg(long)]
        ranges: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        out: OutFile,
    },
}

#[derive(Debug, Subcommand)]
pub enum VoxelizeCmd {
    /// Voxelize an OBJ mesh whose groups are segments.
    Mesh {
        input: PathBuf,
        #[arg(long)]
        r: u32,
        /// Keep at most this many voxels per segment.
        #[arg(long)]
        k_seg: Option<usize>,
        /// Keep at most this many voxels overall.
        #[arg(long)]
        k_all: Option<usize>,
        /// Required when a cap is given.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Voxelize a splat CSV and carve exterior space.
    Splats {
        input: PathBuf,
        #[arg(long)]
        r: u32,
        #[arg(long, default_value_t = voxmat::voxelizer::DEFAULT_VIEWS)]
        views: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub voxels: PathBuf,
    /// Camera list JSON, one entry per feature map.
    #[arg(long)]
    pub cameras: PathBuf,
    /// `VFMP` feature maps in camera order.
    #[arg(long, num_args = 1.., required = true)]
    pub maps: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutFile,
}

#[derive(Debug, Args)]
pub struct AnnotatedInputs {
    #[arg(long)]
    pub voxels: PathBuf,
    /// Feature CSV from `lift`.
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FieldCmd {
    /// Train a head against ground-truth materials through a frozen autoencoder.
    Train {
        #[command(flatten)]
        inputs: AnnotatedInputs,
        /// Ground-truth material CSV `voxel_index,e_pa,nu,rho_kgm3`.
        #[arg(long)]
        materials: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_final: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        subsample_cap: Option<usize>,
    },
    /// Material per voxel as a CSV `voxel_index,e_pa,nu,rho_kgm3`.
    Predict {
        #[command(flatten)]
        inputs: AnnotatedInputs,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        /// Snap near-equal property values together (10 Pa, 1e-3, 10 kg/m³).
        #[arg(long)]
        merge: bool,
        #[command(flatten)]
        out: OutFile,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Base {
    E,
    #[value(name = "10")]
    Ten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Prop {
    E,
    Nu,
    Rho,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCmd {
    /// Field errors between predicted and ground-truth material CSVs, one pair per object.
    Field {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Base::E)]
        log_base: Base,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[command(flatten)]
        out: OutFile,
    },
    /// Mass from per-voxel densities and the object volume.
    Mass {
        /// Material CSV `voxel_index,e_pa,nu,rho_kgm3`.
        #[arg(long)]
        materials: PathBuf,
        /// Object volume in m³.
        #[arg(long)]
        volume: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        out: OutFile,
    },
    /// Wasserstein and histogram KL distances between two triplet CSVs.
    Dist {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Properties to compare; all when omitted.
        #[arg(long, value_enum)]
        property: Vec<Prop>,
        #[arg(long, default_value_t = voxmat::metrics::KL_DEFAULT_BINS)]
        bins: usize,
        /// Compare log10 of E and ρ instead of raw values.
        #[arg(long)]
        log: bool,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[command(flatten)]
        out: OutFile,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Corotational,
    NeoHookean,
}

#[derive(Debug, Subcommand)]
pub enum ElasticityCmd {
    /// Lamé parameters, energy density and Kirchhoff stress for one deformation gradient.
    Eval {
        #[arg(long)]
        e: f64,
        #[arg(long)]
        nu: f64,
        /// Deformation gradient as nine row-major values; identity when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        f: Option<Vec<f64>>,
        /// Models to evaluate; both when omitted.
        #[arg(long, value_enum)]
        model: Vec<Model>,
        #[command(flatten)]
        out: OutFile,
    },
}

fn parse_triplet(s: &str) -> Result<MaterialTriplet, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [e, nu, rho] => MaterialTriplet::new(*e, *nu, *rho).map_err(|e| e.to_string()),
        _ => Err(format!("expected E,nu,rho, got {} values", v.len())),
    }
}
