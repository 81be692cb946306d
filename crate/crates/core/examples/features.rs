//! Prints every handcrafted feature block for one turn.

use std::sync::Arc;

use dialogeval::corpus::Turn;
use dialogeval::encoders::SentenceEmbedding;
use dialogeval::features::{FeatureExtractor, Gazetteer, RuleTagger};

fn main() -> anyhow::Result<()> {
    let gazetteer = Gazetteer::new(&["paris", "taylor swift"]);
    let fx = FeatureExtractor::new(Default::default(), Arc::new(RuleTagger), gazetteer);
    let context = [Turn::new(0, "hello there", "hi ! do you like travel ?")];
    let mut turn = Turn::new(
        1,
        "have you been to paris ?",
        "yes , paris is lovely in spring .",
    );
    turn.topic = Some("Travel".into());
    let u = SentenceEmbedding::new(vec![0.3, -0.1, 0.8]);
    let s = SentenceEmbedding::new(vec![0.2, 0.1, 0.7]);
    let v = fx.build(&turn, &context, &u, &s)?;
    let a = fx.analyze(&turn)?;
    println!("user act: {}", fx.inventory.labels()[a.act_user]);
    println!("system act: {}", fx.inventory.labels()[a.act_system]);
    println!("entities: {:?} / {:?}", a.entities_user, a.entities_system);
    for block in &fx.layout.blocks {
        let vals = v.block(&fx.layout, &block.name).expect("block");
        let nonzero: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, x)| format!("{i}:{x:.3}"))
            .collect();
        println!(
            "{:<22} dim {:>3}  {}",
            block.name,
            vals.len(),
            nonzero.join(" ")
        );
    }
    Ok(())
}
