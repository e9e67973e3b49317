//! Acceptance suite. Each criterion prints one PASS/FAIL/SKIP line to the
//! real stdout, so the summary shows up even when output is captured.
//!
//! ```text
//! cargo test -p rfc2cpsa --test acceptance
//! ```

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfc2cpsa_core::eval::{evaluate, load_references, similarity, ted, RawOutput, Tree};
use rfc2cpsa_core::model::{lower_protocol, LowerCode, Protocol};
use rfc2cpsa_core::postprocess::{process, repair, ProcessConfig, RepairKind, DEFAULT_MAX_REPAIR_PARENS};
use rfc2cpsa_core::sexpr::{balance_info, is_valid_symbol, parse, print_canonical, SExpr, SExprKind};
use rfc2cpsa_core::validate::{check_text, ValidationCode};

use common::{code, fixture, run};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn read(rel: &str) -> String {
    fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn listing2_protocol() -> Protocol {
    let text = read("references/meeting-location.scm");
    lower_protocol(&parse(&text).unwrap()[0]).unwrap().value
}

fn criterion1() -> Outcome {
    let raw = read("recorded/listing1.txt");
    let out = process(&raw, &ProcessConfig::default());
    ensure(out.candidates.is_empty(), || format!("{} candidates", out.candidates.len()))?;
    let refs = load_references(&fixture("references")).map_err(|e| e.to_string())?;
    let report = evaluate(&[RawOutput { id: "listing1".into(), raw }], &refs, &ProcessConfig::default())
        .map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 1, || format!("{} rows", report.rows.len()))?;
    let row = &report.rows[0];
    ensure(!row.extraction_ok, || "extraction_ok is true".into())?;
    Ok("0 candidates, extraction_ok=false".into())
}

fn criterion2() -> Outcome {
    let raw = read("recorded/listing2.txt");
    let out = process(&raw, &ProcessConfig::default());
    ensure(out.candidates.len() == 1, || format!("{} candidates", out.candidates.len()))?;
    ensure(out.extraction.is_empty(), || format!("extraction actions {:?}", out.extraction))?;
    let c = &out.candidates[0];
    let kinds: Vec<_> = c.repairs.iter().map(|r| r.kind.clone()).collect();
    ensure(kinds == [RepairKind::AppendCloseParens { count: 1 }], || format!("repairs {kinds:?}"))?;
    ensure(c.parse_ok && c.lower_ok && c.validate_ok, || {
        format!("flags parse={} lower={} validate={}", c.parse_ok, c.lower_ok, c.validate_ok)
    })?;
    let p = c.model.as_ref().and_then(|m| m.protocol()).ok_or("no protocol model")?;
    ensure(p.name == "meeting-location", || format!("protocol {}", p.name))?;
    let alice = p.role("alice").ok_or("no alice role")?;
    ensure(alice.trace.len() == 3, || format!("alice trace has {} events", alice.trace.len()))?;
    let names = |ts: &[rfc2cpsa_core::model::Term]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    ensure(names(&alice.pen_non_orig) == ["x"], || format!("pen-non-orig {:?}", names(&alice.pen_non_orig)))?;
    ensure(names(&alice.uniq_orig) == ["n"], || format!("uniq-orig {:?}", names(&alice.uniq_orig)))?;
    let errors = c.error_count();
    let warnings: Vec<_> = c.diagnostics.iter().filter(|d| !d.is_error()).collect();
    ensure(errors == 0, || format!("{errors} errors"))?;
    ensure(warnings.len() == 1 && warnings[0].code == "UnusedVariable" && warnings[0].message.contains("kh"), || {
        format!("warnings {:?}", c.render_diagnostics())
    })?;
    Ok("1 candidate, AppendCloseParens(1), one UnusedVariable(kh) warning".into())
}

fn arb_atom() -> impl Strategy<Value = SExpr> {
    prop_oneof![
        "[a-z*/_-][a-z0-9*/_+:-]{0,8}".prop_filter("symbol", |s| is_valid_symbol(s)).prop_map(SExpr::symbol),
        "[ -~]{0,10}".prop_map(SExpr::string),
        any::<i64>().prop_map(SExpr::int),
    ]
}

fn arb_sexpr() -> impl Strategy<Value = SExpr> {
    arb_atom().prop_recursive(8, 256, 3, |inner| prop::collection::vec(inner, 0..5).prop_map(SExpr::list))
}

/// A tree whose list nesting is exactly `depth`.
fn sexpr_of_depth(depth: usize) -> BoxedStrategy<SExpr> {
    if depth == 0 {
        return arb_atom().boxed();
    }
    let shallow = || {
        arb_atom()
            .prop_recursive(depth as u32 - 1, 12, 3, |inner| prop::collection::vec(inner, 0..4).prop_map(SExpr::list))
    };
    (prop::collection::vec(shallow(), 0..3), sexpr_of_depth(depth - 1), prop::collection::vec(shallow(), 0..3))
        .prop_map(|(mut before, spine, after)| {
            before.push(spine);
            before.extend(after);
            SExpr::list(before)
        })
        .boxed()
}

fn arb_tree() -> impl Strategy<Value = SExpr> {
    prop_oneof![arb_sexpr(), (0usize..=8).prop_flat_map(sexpr_of_depth)]
}

fn list_depth(e: &SExpr) -> usize {
    match &e.kind {
        SExprKind::List(items) => 1 + items.iter().map(list_depth).max().unwrap_or(0),
        _ => 0,
    }
}

fn criterion3() -> Outcome {
    let config = Config { cases: 1000, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let depths = std::cell::RefCell::new(BTreeSet::new());
    let result = runner.run(&arb_tree(), |x| {
        let depth = list_depth(&x);
        depths.borrow_mut().insert(depth);
        prop_assert!(depth <= 8);
        let printed = print_canonical(&x);
        prop_assert_eq!(parse(&printed).map_err(|e| TestCaseError::fail(e.to_string()))?, vec![x.clone()]);
        let b = balance_info(&printed);
        prop_assert_eq!(b.open_surplus, 0);
        prop_assert_eq!(b.first_error_span, None);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let depths = depths.into_inner();
    ensure(depths.len() == 9, || format!("nesting depths seen {depths:?}"))?;
    Ok("1000 trees round-trip, nesting depths 0..=8 all covered".into())
}

/// One defect per mutant, applied to the clean two-role fixture.
fn mutants(base: &str) -> Vec<(&'static str, String)> {
    let sub = |from: &str, to: &str| {
        assert_eq!(base.matches(from).count(), 1, "mutation anchor {from:?} is not unique");
        base.replacen(from, to, 1)
    };
    let bob_trace =
        "(trace\n      (recv (enc h (pubk b)))\n      (send (exp (gen) y))\n      (recv (enc n (exp h y))))";
    let protocol_end = base.find("\n\n(defskeleton").expect("skeleton follows protocol");
    let empty_protocol = format!("(defprotocol meeting-location diffie-hellman){}", &base[protocol_end..]);
    vec![
        (
            "UndeclaredVariable",
            sub("(recv h)\n      (send (enc n (exp h x)))", "(recv (cat h z))\n      (send (enc n (exp h x)))"),
        ),
        (
            "UnusedVariable",
            sub("(vars (x expn) (h base) (b name) (n text))", "(vars (x expn) (h base) (b name) (n text) (z text))"),
        ),
        ("SortMismatch", sub("(send (enc (exp (gen) x) (pubk b)))", "(send (enc (exp (gen) n) (pubk b)))")),
        ("DeclTargetMissing", sub("(uniq-orig n))\n  (defrole", "(uniq-orig q))\n  (defrole")),
        ("DuplicateRoleName", sub("(defrole bob", "(defrole alice")),
        ("UnknownRoleInStrand", sub("(defstrand alice 3", "(defstrand carol 3")),
        ("HeightExceedsTrace", sub("(defstrand alice 3", "(defstrand alice 4")),
        ("EmptyTraceRole", sub(bob_trace, "(trace)")),
        ("NonOriginatingUniq", sub("(pen-non-orig y)))", "(pen-non-orig y)\n    (uniq-orig n)))")),
        ("UnknownForm", sub("meeting-location diffie-hellman", "meeting-location dh-algebra")),
        ("UnknownSort", sub("(vars (n text) (x expn) (b name))", "(vars (n text) (x expn) (b nme))")),
        ("UnknownOperator", sub("(send (enc (exp (gen) x) (pubk b)))", "(send (enc (exp (gen) x) (pubkey b)))")),
        ("ArityError", sub("(send (enc (exp (gen) x) (pubk b)))", "(send (enc (exp (gen) x x) (pubk b)))")),
        ("MalformedVars", sub("(vars (x expn) (h base) (b name) (n text))", "(vars (x) (h base) (b name) (n text))")),
        (
            "MalformedTrace",
            sub("(recv h)\n      (send (enc n (exp h x)))", "(receive h)\n      (send (enc n (exp h x)))"),
        ),
        ("EmptyRole", empty_protocol),
    ]
}

fn reported_codes(text: &str) -> BTreeSet<String> {
    let check = check_text(text);
    let mut codes = BTreeSet::new();
    if let Some(e) = &check.parse_error {
        codes.insert(e.code().to_string());
    }
    if let Some(doc) = &check.document {
        codes.extend(doc.diagnostics.iter().map(|d| d.code.to_string()));
    }
    codes.extend(check.validation.iter().map(|d| d.code.as_str().to_string()));
    codes
}

fn criterion4() -> Outcome {
    let base = read("protocols/dh-two-role.scm");
    let clean = check_text(&base);
    ensure(clean.is_clean() && clean.render_lines().is_empty(), || {
        format!("base not clean: {:?}", clean.render_lines())
    })?;
    let expected: BTreeSet<String> = ValidationCode::CORE
        .iter()
        .map(|c| c.as_str().to_string())
        .chain(LowerCode::ALL.iter().map(|c| c.as_str().to_string()))
        .collect();
    let ms = mutants(&base);
    let covered: BTreeSet<String> = ms.iter().map(|(c, _)| c.to_string()).collect();
    ensure(covered == expected && ms.len() == 16, || format!("mutants cover {covered:?}"))?;
    let mut wrong = Vec::new();
    for (want, text) in &ms {
        let got = reported_codes(text);
        if got.len() != 1 || !got.contains(*want) {
            wrong.push(format!("{want}: got {got:?}"));
        }
    }
    ensure(wrong.is_empty(), || wrong.join("; "))?;
    Ok("16/16 mutants report exactly their code, base clean".into())
}

fn rename_symbols(e: &SExpr, map: &HashMap<String, String>) -> SExpr {
    match &e.kind {
        SExprKind::Symbol(s) => SExpr::symbol(map.get(s).cloned().unwrap_or_else(|| s.clone())),
        SExprKind::List(items) => SExpr::list(items.iter().map(|i| rename_symbols(i, map)).collect()),
        _ => e.clone(),
    }
}

fn symbols(e: &SExpr, out: &mut BTreeSet<String>) {
    match &e.kind {
        SExprKind::Symbol(s) => {
            out.insert(s.clone());
        }
        SExprKind::List(items) => items.iter().for_each(|i| symbols(i, out)),
        _ => {}
    }
}

/// Ordered tree over a small label alphabet, used by the brute-force oracle.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct T {
    l: u8,
    c: Vec<T>,
}

const LABELS: u8 = 3;
const MAX_NODES: usize = 6;

fn size(t: &T) -> usize {
    1 + t.c.iter().map(size).sum::<usize>()
}

/// `by_size[n]` holds every tree with exactly `n` nodes.
fn all_trees() -> Vec<Vec<T>> {
    let mut trees: Vec<Vec<T>> = vec![Vec::new(); MAX_NODES + 1];
    let mut forests: Vec<Vec<Vec<T>>> = vec![vec![Vec::new()]];
    for n in 1..=MAX_NODES {
        for l in 0..LABELS {
            for f in &forests[n - 1] {
                trees[n].push(T { l, c: f.clone() });
            }
        }
        let mut fs = Vec::new();
        for k in 1..=n {
            for t in &trees[k] {
                for rest in &forests[n - k] {
                    let mut f = vec![t.clone()];
                    f.extend(rest.iter().cloned());
                    fs.push(f);
                }
            }
        }
        forests.push(fs);
    }
    trees
}

/// Results of deleting one non-root node: its children take its place.
fn delete_inner(t: &T) -> Vec<T> {
    let mut out = Vec::new();
    for i in 0..t.c.len() {
        let mut c = t.c.clone();
        let removed = c.remove(i);
        for (k, g) in removed.c.into_iter().enumerate() {
            c.insert(i + k, g);
        }
        out.push(T { l: t.l, c });
        for d in delete_inner(&t.c[i]) {
            let mut c = t.c.clone();
            c[i] = d;
            out.push(T { l: t.l, c });
        }
    }
    out
}

fn relabels(t: &T) -> Vec<T> {
    let mut out: Vec<T> = (0..LABELS).filter(|&l| l != t.l).map(|l| T { l, c: t.c.clone() }).collect();
    for i in 0..t.c.len() {
        for r in relabels(&t.c[i]) {
            let mut c = t.c.clone();
            c[i] = r;
            out.push(T { l: t.l, c });
        }
    }
    out
}

fn to_tree(t: &T) -> Tree {
    Tree::node(["a", "b", "c"][t.l as usize], t.c.iter().map(to_tree).collect())
}

/// Labels appear in first-use order along the preorder walk.
fn canonical_labels(t: &T) -> bool {
    fn walk(t: &T, next: &mut u8) -> bool {
        if t.l > *next {
            return false;
        }
        if t.l == *next {
            *next += 1;
        }
        t.c.iter().all(|c| walk(c, next))
    }
    walk(t, &mut 0)
}

/// Edit graph over all trees of at most `MAX_NODES` nodes. Edges are single
/// relabels and single deletions, with insertions as reversed deletions.
/// Deleting a root is allowed when it has exactly one child, so every
/// intermediate stays a tree.
struct EditGraph {
    trees: Vec<T>,
    adj: Vec<Vec<u32>>,
}

impl EditGraph {
    fn build() -> Self {
        let trees: Vec<T> = all_trees().into_iter().flatten().collect();
        let index: HashMap<&T, u32> = trees.iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); trees.len()];
        for (i, t) in trees.iter().enumerate() {
            let mut dels = delete_inner(t);
            if t.c.len() == 1 {
                dels.push(t.c[0].clone());
            }
            for d in dels {
                let j = index[&d] as usize;
                adj[i].push(j as u32);
                adj[j].push(i as u32);
            }
            for r in relabels(t) {
                adj[i].push(index[&r]);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        EditGraph { trees, adj }
    }

    fn distances(&self, source: usize) -> Vec<u8> {
        let mut dist = vec![u8::MAX; self.trees.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u] {
                if dist[v as usize] == u8::MAX {
                    dist[v as usize] = dist[u] + 1;
                    queue.push_back(v as usize);
                }
            }
        }
        dist
    }
}

/// Sampled sources beyond the exhaustive small-source sweep.
const SAMPLED_SOURCES_PER_SIZE: usize = 60;

fn criterion5() -> Outcome {
    let p = listing2_protocol();
    let self_sim = similarity(&p, &p);
    ensure(self_sim == 1.0, || format!("similarity(p,p) = {self_sim}"))?;

    let form = &parse(&read("references/meeting-location.scm")).unwrap()[0];
    let vars: Vec<String> = p.roles.iter().flat_map(|r| r.declared()).map(|(n, _)| n.to_string()).collect();
    let mut taken = BTreeSet::new();
    symbols(form, &mut taken);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..20 {
        let mut map = HashMap::new();
        let mut used = taken.clone();
        for v in &vars {
            let fresh = loop {
                let len = rng.gen_range(1..=6);
                let name: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
                let name = format!("r-{name}");
                if used.insert(name.clone()) {
                    break name;
                }
            };
            map.insert(v.clone(), fresh);
        }
        let renamed = lower_protocol(&rename_symbols(form, &map)).map_err(|d| format!("{d:?}"))?.value;
        ensure(renamed != p, || format!("renaming {round} changed nothing"))?;
        let s = similarity(&p, &renamed);
        ensure(s == 1.0, || format!("renaming {round} {map:?} scored {s}"))?;
    }

    let graph = EditGraph::build();
    let trees: Vec<Tree> = graph.trees.iter().map(to_tree).collect();
    let mut sources: Vec<usize> =
        (0..graph.trees.len()).filter(|&i| size(&graph.trees[i]) <= 4 && canonical_labels(&graph.trees[i])).collect();
    let exhaustive = sources.len();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 5..=MAX_NODES {
        let pool: Vec<usize> = (0..graph.trees.len()).filter(|&i| size(&graph.trees[i]) == n).collect();
        sources.extend(pool.choose_multiple(&mut rng, SAMPLED_SOURCES_PER_SIZE));
    }
    let mut pairs = 0usize;
    for &s in &sources {
        let dist = graph.distances(s);
        for (t, &d) in dist.iter().enumerate() {
            let got = ted(&trees[s], &trees[t]);
            ensure(got == d as usize, || {
                format!("ted({:?}, {:?}) = {got}, brute force {d}", graph.trees[s], graph.trees[t])
            })?;
            pairs += 1;
        }
    }
    Ok(format!(
        "self=1.0, 20 renamings=1.0, ted matches brute force on {pairs} pairs ({} trees; {exhaustive} exhaustive + {} sampled sources)",
        graph.trees.len(),
        sources.len() - exhaustive
    ))
}

fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn translate_runs(out: &Path) -> Vec<(i32, Vec<u8>)> {
    let store = fixture("replay/store");
    let query = fixture("replay/query.txt");
    let exemplars = fixture("exemplars");
    let common = |dir: &str| {
        vec![
            "translate".to_string(),
            "--query-file".into(),
            query.display().to_string(),
            "--mode".into(),
            "replay".into(),
            "--fixtures".into(),
            store.display().to_string(),
            "--out".into(),
            out.join(dir).display().to_string(),
        ]
    };
    let mut l2 = common("listing2");
    l2.extend(["--exemplars".into(), exemplars.display().to_string()]);
    let mut l1 = common("listing1");
    l1.extend(["--max-rounds".into(), "1".into()]);
    [l2, l1]
        .iter()
        .map(|args| {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let o = run(&args);
            (code(&o), o.stdout)
        })
        .collect()
}

fn criterion6() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = translate_runs(&a);
    let second = translate_runs(&b);
    let codes: Vec<i32> = first.iter().map(|r| r.0).collect();
    ensure(codes == [0, 2], || format!("exit codes {codes:?} (want [0, 2])"))?;
    ensure(first == second, || "stdout or exit codes differ between runs".into())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    ensure(fa == fb, || format!("outputs differ: {:?} vs {:?}", fa.keys(), fb.keys()))?;
    ensure(fa.len() >= 5, || format!("only {} output files", fa.len()))?;

    let report = tmp.path().join("report.json");
    let refs = fixture("references");
    let o = run(&[
        "eval",
        "--candidates",
        a.to_str().unwrap(),
        "--references",
        refs.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    ensure(code(&o) == 0, || format!("eval exit {}: {}", code(&o), common::stderr(&o)))?;
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for stage in ["extraction", "parse", "lower", "validate"] {
        let rate = v["totals"][stage]["rate"].as_f64();
        ensure(rate == Some(0.5), || format!("{stage} rate {rate:?}"))?;
    }
    Ok(format!("exit codes [0, 2], {} files byte-identical across runs, stage rates 0.500", fa.len()))
}

fn clean_fixture_texts() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for dir in ["protocols", "exemplars", "references", "corpus/cpsa"] {
        let mut paths: Vec<_> = fs::read_dir(fixture(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        paths.sort();
        for p in paths {
            if p.extension().and_then(|e| e.to_str()) != Some("scm") {
                continue;
            }
            let text = fs::read_to_string(&p).unwrap();
            if check_text(&text).is_clean() {
                out.push((format!("{dir}/{}", p.file_name().unwrap().to_string_lossy()), text));
            }
        }
    }
    out
}

fn criterion7() -> Outcome {
    let files = clean_fixture_texts();
    ensure(files.len() >= 3, || format!("only {} clean fixtures", files.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut repaired = 0;
    for i in 0..500 {
        let (name, text) = &files[i % files.len()];
        let start = text.find('(').expect("fixture has a form");
        let body = &text[start..];
        let cut = rng.gen_range(1..=body.len());
        let input = &body[..cut];
        let Ok((out, actions)) = repair(input, DEFAULT_MAX_REPAIR_PARENS) else { continue };
        repaired += 1;
        let appended: usize = actions
            .iter()
            .map(|a| match a.kind {
                RepairKind::AppendCloseParens { count } => count,
                _ => 0,
            })
            .sum();
        let kept =
            out.strip_suffix(&")".repeat(appended)).ok_or_else(|| format!("{name}@{cut}: closers not at end"))?;
        let kept = if appended > 0 && !input.contains(kept) { kept.strip_suffix('\n').unwrap_or(kept) } else { kept };
        ensure(!kept.is_empty() && input.contains(kept), || format!("{name}@{cut}: kept text is not a substring"))?;
        ensure(parse(&out).is_ok(), || format!("{name}@{cut}: repaired text does not parse"))?;
        let b = balance_info(&out);
        ensure(b.open_surplus == 0, || format!("{name}@{cut}: surplus {}", b.open_surplus))?;
    }
    Ok(format!("500 truncations over {} files, {repaired} repaired, 0 violations", files.len()))
}

fn cpsa_binary() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("CPSA_BIN") {
        return Some(PathBuf::from(p));
    }
    std::env::split_paths(&std::env::var_os("PATH")?).map(|d| d.join("cpsa")).find(|p| p.is_file())
}

/// `Ok(None)` means skipped.
fn criterion8() -> Result<Option<String>, String> {
    let Some(cpsa) = cpsa_binary() else { return Ok(None) };
    let tmp = tempfile::tempdir().unwrap();
    translate_runs(tmp.path());
    let mut files: Vec<PathBuf> = vec![tmp.path().join("listing2/candidate.scm")];
    for dir in ["protocols", "exemplars", "references", "corpus/cpsa"] {
        files.extend(
            fs::read_dir(fixture(dir))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("scm")),
        );
    }
    let (mut linted, mut rejected) = (0, Vec::new());
    for f in &files {
        let path = f.to_str().unwrap();
        if code(&run(&["lint", path])) != 0 {
            continue;
        }
        linted += 1;
        let o = run(&["lint", path, "--cpsa-bin", cpsa.to_str().unwrap()]);
        if code(&o) != 0 {
            rejected.push(format!("{path}: {}", common::stdout(&o).trim()));
        }
    }
    ensure(rejected.is_empty(), || rejected.join("; "))?;
    Ok(Some(format!("{linted} lint-clean files accepted by {}", cpsa.display())))
}

fn report(n: u32, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    let line = format!("criterion {n}: {} ({detail}; {elapsed:.2?})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    ok
}

#[test]
fn acceptance() {
    let results = [
        report(1, Duration::from_secs(1), criterion1),
        report(2, Duration::from_secs(1), criterion2),
        report(3, Duration::from_secs(10), criterion3),
        report(4, Duration::from_secs(5), criterion4),
        report(5, Duration::from_secs(60), criterion5),
        report(6, Duration::from_secs(5), criterion6),
        report(7, Duration::from_secs(10), criterion7),
    ];
    let cpsa_ok = match criterion8() {
        Ok(None) => {
            std::io::stdout()
                .write_all(b"criterion 8: SKIP (no CPSA binary; set CPSA_BIN or put cpsa on PATH)\n")
                .unwrap();
            true
        }
        Ok(Some(d)) => report(8, Duration::MAX, || Ok(d)),
        Err(e) => report(8, Duration::MAX, || Err(e)),
    };
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty() && cpsa_ok, "failed criteria: {failed:?}{}", if cpsa_ok { "" } else { " and 8" });
}
