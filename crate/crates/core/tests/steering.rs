use gradient_atoms::steering::{
    build_eval_suite, report_csv, report_table, run_sweep, task_share, BestCell, Observation,
    Rates, SteeringRow,
};
use gradient_atoms::toy::{forward_generate, generate_corpus, train};
use gradient_atoms::{
    BehaviorDetector, Sign, SteerConfig, SteerResult, SteeringVector, Task, Token, ToyModelParams,
    TrainConfig,
};

fn tokens(output: &[Token]) -> Observation<'_> {
    Observation::Tokens {
        prompt: &[],
        output,
    }
}

#[test]
fn token_detector_vectors() {
    use Token as T;
    let refusal = BehaviorDetector::refusal();
    let list = BehaviorDetector::list();
    let cases: Vec<(&BehaviorDetector, Vec<Token>, bool)> = vec![
        (&refusal, vec![T::R, T::E], true),
        (&refusal, vec![T::R], true),
        (&refusal, vec![T::data(0), T::R], false),
        (&refusal, vec![], false),
        (&list, vec![T::L, T::L, T::E], true),
        (&list, vec![T::L, T::data(2), T::L], true),
        (&list, vec![T::L, T::E], false),
        (&list, vec![T::R, T::E], false),
    ];
    for (det, out, expect) in cases {
        assert_eq!(det.detect(tokens(&out)), expect, "{} on {out:?}", det.name);
    }

    let prompt = [T::ECHO, T::data(4), T::data(5), T::data(6), T::SEP];
    let echo = [T::data(4), T::data(5), T::data(6), T::E];
    let truncated = [T::data(4), T::data(5), T::data(6)];
    let obs = |o| Observation::Tokens {
        prompt: &prompt,
        output: o,
    };
    assert!(BehaviorDetector::echo_match().detect(obs(&echo)));
    assert!(!BehaviorDetector::echo_match().detect(obs(&truncated)));
    assert!(!BehaviorDetector::reverse_match().detect(obs(&echo)));
    assert_eq!(BehaviorDetector::for_task(Task::List).name, "list");
}

#[test]
fn text_detector_vectors() {
    let cases = [
        (BehaviorDetector::text_yes_no(), "No. It is not.", true),
        (BehaviorDetector::text_yes_no(), "Maybe\nYes", false),
        (
            BehaviorDetector::text_code(),
            "Here:\n```rust\nfn f() {}\n```",
            true,
        ),
        (BehaviorDetector::text_code(), "plain prose", false),
        (
            BehaviorDetector::text_refusal(),
            "Could you clarify what you mean?",
            true,
        ),
        (BehaviorDetector::text_refusal(), "Sure, here it is.", false),
        (
            BehaviorDetector::text_bullets(),
            "- one\n- two\n- three",
            true,
        ),
        (BehaviorDetector::text_bullets(), "- only one", false),
        (BehaviorDetector::text_numbered(), "1. a\n2. b", true),
        (BehaviorDetector::text_numbered(), "1. a\nb", false),
    ];
    for (det, text, expect) in cases {
        assert_eq!(
            det.detect(Observation::Text(text)),
            expect,
            "{} on {text:?}",
            det.name
        );
    }
}

#[test]
fn suite_is_split_sixty_forty_and_seeded() {
    for task in Task::ALL {
        let suite = build_eval_suite(task, 11, 100).unwrap();
        let targets: Vec<_> = suite.prompts.iter().filter(|p| p.is_target).collect();
        assert_eq!(targets.len(), 60);
        assert!(targets.iter().all(|p| p.task == task));
        assert!(suite
            .prompts
            .iter()
            .filter(|p| !p.is_target)
            .all(|p| p.task != task));
        assert_ne!(suite, build_eval_suite(task, 12, 100).unwrap());
    }
    let refuse = build_eval_suite(Task::Refuse, 1, 50).unwrap();
    assert!(refuse
        .prompts
        .iter()
        .filter(|p| p.is_target)
        .all(|p| p.tokens[0] == Token::REFUSE));
}

fn small_model() -> ToyModelParams {
    let docs = generate_corpus(3, 40);
    let cfg = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    train(&docs, &cfg).unwrap().0
}

#[test]
fn zero_vector_sweep_reproduces_the_baseline() {
    let params = small_model();
    let v = SteeringVector::zeros(&params.registry());
    let cfg = SteerConfig::default();
    let suite = build_eval_suite(Task::Refuse, 2, 40).unwrap();
    let result = run_sweep(&params, &v, &cfg, &suite, &BehaviorDetector::refusal()).unwrap();
    assert_eq!(result.rate_table().len(), 2 * cfg.scales.len() + 1);
    for cell in &result.cells {
        assert_eq!(cell.rates, Some(result.baseline));
    }
    let best = result.best_up.unwrap();
    assert_eq!(best.delta, 0.0);

    // The baseline is the plain detector rate of unperturbed generations.
    let hits = suite
        .prompts
        .iter()
        .filter(|p| {
            let out = forward_generate(&params, &p.tokens, cfg.max_len);
            BehaviorDetector::refusal().detect(Observation::Tokens {
                prompt: &p.tokens,
                output: &out,
            })
        })
        .count();
    assert_eq!(result.baseline.rate, hits as f64 / 40.0);
    assert_eq!(
        result.plot_data_csv().lines().count(),
        2 + 2 * cfg.scales.len()
    );
}

#[test]
fn sweep_rejects_foreign_vectors() {
    let params = ToyModelParams::init(6, 16, 0);
    let other = ToyModelParams::init(5, 16, 0);
    let v = SteeringVector::zeros(&other.registry());
    let suite = build_eval_suite(Task::List, 0, 20).unwrap();
    assert!(run_sweep(
        &params,
        &v,
        &SteerConfig::default(),
        &suite,
        &BehaviorDetector::list()
    )
    .is_err());
}

#[test]
fn steering_vector_file_round_trip() {
    let params = ToyModelParams::init(6, 16, 3);
    let registry = params.registry();
    let mut v = SteeringVector::zeros(&registry);
    v.values
        .iter_mut()
        .enumerate()
        .for_each(|(i, x)| *x = (i as f64).sin());
    v.source_atom = 9;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steer.gat");
    v.write(&path, &registry).unwrap();
    assert_eq!(SteeringVector::read(&path).unwrap(), v);
    let foreign = ToyModelParams::init(4, 16, 0).registry();
    assert!(v.write(&path, &foreign).is_err());
}

fn row(base: f64, up: f64, down: f64) -> SteeringRow {
    let cell = |rate: f64, sign| BestCell {
        scale: 5.0,
        sign,
        rate,
        delta: rate - base,
    };
    SteeringRow {
        atom: 469,
        behavior: "Bulleted Lists".into(),
        coherence: Some(0.103),
        result: SteerResult {
            detector: "list".into(),
            source_atom: 469,
            baseline: Rates {
                rate: base,
                target_rate: base,
                neutral_rate: 0.0,
            },
            cells: vec![],
            best_up: Some(cell(up, Sign::Minus)),
            best_down: Some(cell(down, Sign::Plus)),
        },
    }
}

#[test]
fn table_rows_show_percentages_and_point_deltas() {
    let table = report_table(&[row(0.33, 0.94, 0.0)]);
    assert_eq!(table[0][3], "33%");
    assert_eq!(table[0][4], "94%");
    assert_eq!(table[0][5], "+61pp");
    assert_eq!(table[0][6], "0%");
    assert_eq!(table[0][7], "-33pp");
    assert_eq!(
        report_csv(&[]),
        "Atom,Behavior,Coherence,Base,Best↑,Δ↑,Best↓,Δ↓\n"
    );
}

#[test]
fn task_share_counts_fractions() {
    let tasks = [Task::List, Task::List, Task::Refuse, Task::List];
    assert_eq!(task_share(&tasks, Task::List), 0.75);
    assert_eq!(task_share(&[], Task::List), 0.0);
}
