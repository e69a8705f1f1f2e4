mod support;

use longctx::niah::CellKey;
use longctx::niah::{
    self, generate_case, generate_case_with, run_grid, ClientError, CompletionClient, CompletionRequest,
    EndpointAdapter, FillerCorpus, FixtureClient, GridSpec, HttpClient, NiahCase, RetryPolicy, TokenCounter,
    Verdict,
};
use proptest::prelude::*;
use serde_json::json;
use std::time::Duration;
use support::{echo_server, MockServer};

struct Words;

impl TokenCounter for Words {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[test]
fn depth_50_of_1000_sentences() {
    let corpus = FillerCorpus::parse("Filler.\nHay.\nStraw.\n").unwrap();
    let case = NiahCase::new(0, 50.0, "7418118", 5);
    let needle_words = Words.count_tokens(&case.needle());
    let case = NiahCase::new(1000 + needle_words, 50.0, "7418118", 5);
    let g = generate_case_with(&case, &corpus, &Words).unwrap();
    assert_eq!(g.sentence_count, 1001);

    // Locate the payload and count the sentences in front of it.
    let at = g.document.find("7418118").unwrap();
    let needle_start = g.document[..at].rfind(". ").map_or(0, |i| i + 2);
    let before = g.document[..needle_start].matches(". ").count();
    assert!((499..=501).contains(&before), "needle after {before} sentences");
    assert_eq!(before, g.needle_sentence_index);
}

#[test]
fn generation_is_byte_identical() {
    let case = NiahCase::new(4000, 37.5, "90210", 99);
    let a = serde_json::to_string(&generate_case(&case).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_case(&case).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn fixture_spec() -> GridSpec {
    let mut spec = GridSpec::new(vec![400, 800, 1600], vec![0.0, 50.0, 100.0], 2);
    spec.seed = 11;
    spec
}

fn fixture_client() -> FixtureClient {
    FixtureClient::from_json(include_str!("fixtures/niah_grid_3x3x2.json")).unwrap()
}

#[test]
fn fixture_grid_matches_hand_tally() {
    let report = run_grid(&fixture_spec(), &fixture_client()).unwrap();
    // (exact, truncated, wrong, empty, errors) per cell, tallied by hand from
    // the fixture file.
    let tally = [
        [(2, 0, 0, 0, 0), (1, 1, 0, 0, 0), (2, 0, 0, 0, 0)],
        [(1, 1, 0, 0, 0), (0, 0, 1, 1, 0), (1, 0, 0, 0, 1)],
        [(1, 1, 0, 0, 0), (0, 0, 2, 0, 0), (0, 0, 0, 0, 2)],
    ];
    for (li, row) in report.cells.iter().enumerate() {
        for (di, c) in row.iter().enumerate() {
            assert_eq!(
                (c.exact, c.truncated, c.wrong, c.empty, c.errors),
                tally[li][di],
                "length {} depth {}",
                c.length,
                c.depth
            );
            assert_eq!(c.exact_rate, tally[li][di].0 as f64 / 2.0);
            assert_eq!(c.truncated_rate, tally[li][di].1 as f64 / 2.0);
        }
    }
    assert_eq!(
        report.to_csv(),
        "length,0,50,100\n400,1,0.5,1\n800,0.5,0,0.5\n1600,0.5,0,error\n"
    );
}

#[test]
fn grid_equals_recount_of_individual_scores() {
    let report = run_grid(&fixture_spec(), &fixture_client()).unwrap();
    for row in &report.cells {
        for cell in row {
            let mine: Vec<_> = report
                .details
                .iter()
                .filter(|d| d.length == cell.length && d.depth == cell.depth)
                .collect();
            let rescored: Vec<Option<Verdict>> = mine
                .iter()
                .map(|d| {
                    d.answer
                        .as_ref()
                        .map(|a| niah::score(&d.expected, a).unwrap().verdict)
                })
                .collect();
            let count = |v| rescored.iter().filter(|r| **r == Some(v)).count();
            assert_eq!(cell.exact, count(Verdict::Exact));
            assert_eq!(cell.truncated, count(Verdict::Truncated));
            assert_eq!(cell.wrong, count(Verdict::Wrong));
            assert_eq!(cell.empty, count(Verdict::Empty));
            assert_eq!(cell.errors, rescored.iter().filter(|r| r.is_none()).count());
        }
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(1),
    }
}

fn http(url: &str) -> HttpClient {
    HttpClient::new(
        url,
        EndpointAdapter::default(),
        fast_retry(),
        Duration::from_secs(10),
    )
}

fn request(prompt: &str) -> CompletionRequest<'_> {
    CompletionRequest {
        prompt,
        max_tokens: 24,
        cell: CellKey {
            length: 1,
            depth: 0.0,
            trial: 0,
        },
    }
}

#[test]
fn http_native_protocol() {
    let server = MockServer::start(|_, _| (200, r#"{"text": "It is 7418118."}"#.into()));
    let answer = http(&server.url).complete(&request("find the number")).unwrap();
    assert_eq!(answer, "It is 7418118.");
    assert_eq!(
        server.bodies(),
        vec![json!({"prompt": "find the number", "max_tokens": 24, "temperature": 0})]
    );
}

#[test]
fn http_retries_server_errors() {
    let server = MockServer::start(|n, _| match n {
        0 => (500, "{}".into()),
        1 => (429, "{}".into()),
        _ => (200, r#"{"text": "ok"}"#.into()),
    });
    assert_eq!(http(&server.url).complete(&request("p")).unwrap(), "ok");
    assert_eq!(server.hits(), 3);
}

#[test]
fn http_gives_up_after_three_attempts() {
    let server = MockServer::start(|_, _| (503, "{}".into()));
    let err = http(&server.url).complete(&request("p")).unwrap_err();
    assert!(
        matches!(err, ClientError::Unreachable { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(server.hits(), 3);
}

#[test]
fn http_connection_refused_is_unreachable() {
    let url = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/", l.local_addr().unwrap())
    };
    let err = http(&url).complete(&request("p")).unwrap_err();
    assert!(
        matches!(err, ClientError::Unreachable { attempts: 3, .. }),
        "{err}"
    );
}

#[test]
fn http_malformed_response_is_not_retried() {
    let server = MockServer::start(|n, _| {
        if n == 0 {
            (200, "not json".into())
        } else {
            (200, r#"{"answer": "x"}"#.into())
        }
    });
    let client = http(&server.url);
    assert!(matches!(
        client.complete(&request("p")),
        Err(ClientError::Malformed(_))
    ));
    assert_eq!(server.hits(), 1);
    let err = client.complete(&request("p")).unwrap_err();
    assert!(err.to_string().contains("missing /text"), "{err}");
    assert_eq!(server.hits(), 2);
}

#[test]
fn http_adapter_maps_other_shapes() {
    let server = MockServer::start(|_, _| (200, r#"{"choices": [{"text": "123"}]}"#.into()));
    let adapter = EndpointAdapter::from_json(
        r#"{"prompt_field": "input", "max_tokens_field": "max_new_tokens", "temperature_field": null,
            "response_pointer": "/choices/0/text", "extra": {"model": "m"}}"#,
    )
    .unwrap();
    let client = HttpClient::new(&server.url, adapter, fast_retry(), Duration::from_secs(10));
    assert_eq!(client.complete(&request("q")).unwrap(), "123");
    assert_eq!(
        server.bodies()[0],
        json!({"input": "q", "max_new_tokens": 24, "model": "m"})
    );
    assert!(EndpointAdapter::from_json(r#"{"bogus": 1}"#).is_err());
    assert!(EndpointAdapter::from_json(r#"{"response_pointer": "text"}"#).is_err());
}

#[test]
fn http_grid_end_to_end() {
    let server = echo_server();
    let spec = GridSpec::new(vec![300, 700], vec![0.0, 50.0, 100.0], 2);
    let report = run_grid(&spec, &http(&server.url)).unwrap();
    assert!(report.cells.iter().flatten().all(|c| c.exact_rate == 1.0));
    assert_eq!(server.hits(), 12);
}

#[test]
fn http_failures_stay_in_their_cell() {
    let server = MockServer::start(|_, body| {
        let prompt = body["prompt"].as_str().unwrap_or_default();
        if prompt.len() > 3000 {
            (500, "{}".into())
        } else {
            let n = support::first_number(prompt).unwrap_or_default();
            (200, json!({ "text": n }).to_string())
        }
    });
    let spec = GridSpec::new(vec![300, 2000], vec![0.0, 100.0], 1);
    let report = run_grid(&spec, &http(&server.url)).unwrap();
    assert_eq!(report.to_csv(), "length,0,100\n300,1,1\n2000,error,error\n");
    assert!(report.cells[1][0]
        .error
        .as_deref()
        .unwrap()
        .contains("after 3 attempts"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn needle_offset_monotone_in_depth(seed in any::<u64>(), len in 200usize..3000, a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let g_lo = generate_case(&NiahCase::new(len, lo, "31337", seed)).unwrap();
        let g_hi = generate_case(&NiahCase::new(len, hi, "31337", seed)).unwrap();
        prop_assert!(g_lo.needle_char_offset <= g_hi.needle_char_offset);
    }

    #[test]
    fn payload_occurs_exactly_once(seed in any::<u64>(), len in 100usize..4000, depth in 0.0f64..=100.0, payload in "[1-9][0-9]{3,9}") {
        let g = generate_case(&NiahCase::new(len, depth, payload.clone(), seed)).unwrap();
        prop_assert_eq!(g.document.matches(payload.as_str()).count(), 1);
        let dev = (g.token_count as f64 - len as f64).abs() / len as f64;
        prop_assert!(dev <= niah::LENGTH_TOLERANCE, "{} vs {}", g.token_count, len);
    }

    #[test]
    fn exact_iff_payload_verbatim(payload in "[1-9][0-9]{0,9}", noise in "[a-z .,]{0,20}") {
        let answer = format!("{noise} {payload} {noise}");
        prop_assert_eq!(niah::score(&payload, &answer).unwrap().verdict, Verdict::Exact);
    }

    #[test]
    fn dropping_trailing_digits_is_truncated(payload in "[1-9][0-9]{1,11}", cut in 1usize..6) {
        let keep = payload.len().saturating_sub(cut);
        prop_assume!(keep * 2 >= payload.len() && keep > 0);
        let r = niah::score(&payload, &format!("The number is {}.", &payload[..keep])).unwrap();
        prop_assert_eq!(r.verdict, Verdict::Truncated);
        prop_assert_eq!(r.matched_prefix_len, keep);
    }
}
