//! Scores two toy systems against the same references.

use dialogeval::metrics::{score_system, MetricReport};
use dialogeval::text::tokenize;

fn main() -> anyhow::Result<()> {
    let refs: Vec<Vec<String>> = [
        "i really like jazz music .",
        "the weather is nice today .",
        "have you seen it ?",
    ]
    .iter()
    .map(|s| tokenize(s))
    .collect();
    let systems = [
        (
            "dull",
            ["i do not know .", "i do not know .", "i do not know ."],
        ),
        (
            "close",
            [
                "i like jazz music .",
                "the weather is nice .",
                "did you see it ?",
            ],
        ),
    ];
    let mut report = MetricReport::default();
    for (name, outputs) in systems {
        let hyps: Vec<Vec<String>> = outputs.iter().map(|s| tokenize(s)).collect();
        report.rows.push(score_system(name, &hyps, &refs)?);
    }
    print!("{report}");
    Ok(())
}
