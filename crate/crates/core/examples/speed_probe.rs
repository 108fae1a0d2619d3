use disentangle_core::eval::*;
use disentangle_core::featurize::*;
use disentangle_core::intervene::*;
use disentangle_core::lm::{train::train_lm, LmConfig};
use disentangle_core::world::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let world = generate_world(&WorldSpec::default()).unwrap();
    let cfg = LmConfig { seed: 1, ..LmConfig::default() };
    let (model, report) = train_lm(&world, &cfg).unwrap();
    println!("[{:.0}s] trained: steps={} loss={:.3} dev_acc={:.3} ({} prompts)",
        t0.elapsed().as_secs_f64(), report.steps, report.final_loss, report.dev_accuracy, report.dev_prompts);

    let (fworld, freport) = filter_instance(&world, &model, 0.9).unwrap();
    println!("[{:.0}s] filtered: entities {}->{} templates {}->{}",
        t0.elapsed().as_secs_f64(), freport.entities_before, freport.entities_after,
        freport.attr_templates_before, freport.attr_templates_after);

    // Full-rep cause across layers on entity-split dev tuples for "region"
    let tok = model.tokenizer.clone();
    let tuples_raw = pair_interventions(&fworld, SplitMode::Entity, Part::Dev, "region", 200, 77).unwrap();
    let tuples = resolve_tuples(&tok, &tuples_raw).unwrap();
    for layer in 0..model.cfg.n_layers {
        let site = ActivationSite { layer };
        let fr = FeatureHandle::full_rep(model.d_model(), site);
        let c = score_cause(&model, &fr, &tuples, MatchRule::FirstToken).unwrap();
        let i = score_iso(&model, &fr, &tuples, MatchRule::FirstToken).unwrap();
        println!("[{:.0}s] full-rep L{layer}: cause={c:.3} iso={i:.3}", t0.elapsed().as_secs_f64());
    }
}
