use clap::Parser;

use spg_core::backbone::{DenoiserProfile, LatentDenoiser};
use spg_core::sampler::SamplerMode;
use spg_eval::ablate::Sweep;
use spg_eval::cli::Cli;
use spg_eval::config::FileConfig;

fn merged(args: &[&str]) -> FileConfig {
    Cli::try_parse_from(std::iter::once("spg").chain(args.iter().copied()))
        .unwrap()
        .merged()
        .unwrap()
}

#[test]
fn cli_defaults_match_published_settings() {
    let s = merged(&["generate", "--prompt", "a deer"]).resolve();
    assert_eq!((s.lambda_cfg, s.lambda_spg, s.steps), (7.0, 3.0, 50));
    assert_eq!(s.mode, SamplerMode::SpgCfg);
    assert!(s.adain);
    let b = LatentDenoiser::synthetic(DenoiserProfile::sdxl(), 0);
    let config = s.sampler_config(&b).unwrap();
    assert_eq!(config.selection.ids(), &[65, 66, 67, 68, 69, 70]);
    assert_eq!(config.schedule.ddim_steps(), 50);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "lambda_spg = 12.0\nseed = 9\nmode = \"spg_only\"\nadain = false\n").unwrap();
    let c = cfg.to_str().unwrap();
    let s = merged(&["--config", c, "generate", "--seed", "4"]).resolve();
    assert_eq!((s.lambda_spg, s.seed, s.mode, s.adain), (12.0, 4, SamplerMode::SpgOnly, false));
    let s = merged(&["generate", "--config", c, "--adain", "on", "--lambda-spg", "-1"]).resolve();
    assert_eq!((s.lambda_spg, s.adain), (-1.0, true));
}

#[test]
fn every_flag_has_a_config_key() {
    let toml = "backbone = \"sd15\"\nweights_dir = \"/w\"\nlayers = \"all\"\nsteps = 10\nseed = 1\n\
                lambda_cfg = 1.0\nlambda_spg = 2.0\nmode = \"cfg_only\"\nadain = true\nwidth = 64\nheight = 128\n\
                extraction = \"ddim_inversion\"\nstyle = \"s.png\"\nfeatures = \"f.safetensors\"\nprompt = \"p\"\nout = \"o.png\"\n";
    let f: FileConfig = toml::from_str(toml).unwrap();
    let s = f.resolve();
    assert_eq!(s.height, 128);
    assert_eq!(s.weights_dir, std::path::PathBuf::from("/w"));
}

#[test]
fn invalid_values_are_rejected_at_parse_time() {
    for bad in [
        vec!["generate", "--mode", "fancy"],
        vec!["generate", "--adain", "maybe"],
        vec!["generate", "--steps", "-3"],
        vec!["extract", "--extraction", "sideways"],
        vec!["ablate", "--prompt", "x"],
    ] {
        let e = Cli::try_parse_from(std::iter::once("spg").chain(bad.iter().copied())).unwrap_err();
        assert!(e.use_stderr(), "{bad:?}");
    }
}

#[test]
fn sweep_parsing() {
    assert_eq!(
        "lambda_spg=3..15".parse::<Sweep>().unwrap(),
        Sweep::LambdaSpg(vec![3.0, 6.0, 9.0, 12.0, 15.0])
    );
    assert_eq!("lambda_spg=0..2:1".parse::<Sweep>().unwrap(), Sweep::LambdaSpg(vec![0.0, 1.0, 2.0]));
    assert_eq!("lambda_cfg=5,7.5".parse::<Sweep>().unwrap(), Sweep::LambdaCfg(vec![5.0, 7.5]));
    assert_eq!(
        "layers=all|last6|1,3,10-12".parse::<Sweep>().unwrap(),
        Sweep::Layers(vec!["all".into(), "last6".into(), "1,3,10-12".into()])
    );
    assert_eq!("adain=on|off".parse::<Sweep>().unwrap(), Sweep::Adain(vec![true, false]));
    for bad in ["lambda_spg", "lambda_spg=", "lambda_spg=15..3", "adain=sometimes", "gamma=1", "lambda_spg=a..b", "lambda_spg=inf"] {
        let e = bad.parse::<Sweep>().unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}");
    }
}

#[test]
fn sweep_variants_change_only_their_key() {
    let base = FileConfig::default().resolve();
    let v = "lambda_spg=3..15".parse::<Sweep>().unwrap().variants(&base);
    assert_eq!(v.len(), 5);
    assert_eq!(v[4].label, "lambda_spg=15");
    assert_eq!(v[4].settings.lambda_spg, 15.0);
    assert_eq!(v[4].settings.lambda_cfg, base.lambda_cfg);
    assert_eq!(v[4].settings.layers, base.layers);

    let b = LatentDenoiser::synthetic(DenoiserProfile::sdxl(), 0);
    let v = "layers=all".parse::<Sweep>().unwrap().variants(&base);
    let sel = v[0].settings.selection(&b).unwrap();
    assert_eq!(sel.ids(), (1..=70).collect::<Vec<u32>>().as_slice());
}
