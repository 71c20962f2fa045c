//! Labels a model's explanation with the optimization kinds it describes.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptimizationKind {
    LoopInterchange,
    LoopFusion,
    LoopFission,
    LoopTiling,
    LoopUnrolling,
    FusedMultiplyAdd,
    PrecisionChange,
    MathSimplification,
    OmpParallelFor,
    OmpScoping,
    OmpSimd,
    Prefetch,
    MemoryAccessPattern,
    PrecomputeConstants,
    FunctionOverheadReduction,
    AlgorithmicChange,
    Other,
}

impl OptimizationKind {
    pub const ALL: [OptimizationKind; 17] = [
        OptimizationKind::LoopInterchange,
        OptimizationKind::LoopFusion,
        OptimizationKind::LoopFission,
        OptimizationKind::LoopTiling,
        OptimizationKind::LoopUnrolling,
        OptimizationKind::FusedMultiplyAdd,
        OptimizationKind::PrecisionChange,
        OptimizationKind::MathSimplification,
        OptimizationKind::OmpParallelFor,
        OptimizationKind::OmpScoping,
        OptimizationKind::OmpSimd,
        OptimizationKind::Prefetch,
        OptimizationKind::MemoryAccessPattern,
        OptimizationKind::PrecomputeConstants,
        OptimizationKind::FunctionOverheadReduction,
        OptimizationKind::AlgorithmicChange,
        OptimizationKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizationKind::LoopInterchange => "LoopInterchange",
            OptimizationKind::LoopFusion => "LoopFusion",
            OptimizationKind::LoopFission => "LoopFission",
            OptimizationKind::LoopTiling => "LoopTiling",
            OptimizationKind::LoopUnrolling => "LoopUnrolling",
            OptimizationKind::FusedMultiplyAdd => "FusedMultiplyAdd",
            OptimizationKind::PrecisionChange => "PrecisionChange",
            OptimizationKind::MathSimplification => "MathSimplification",
            OptimizationKind::OmpParallelFor => "OmpParallelFor",
            OptimizationKind::OmpScoping => "OmpScoping",
            OptimizationKind::OmpSimd => "OmpSimd",
            OptimizationKind::Prefetch => "Prefetch",
            OptimizationKind::MemoryAccessPattern => "MemoryAccessPattern",
            OptimizationKind::PrecomputeConstants => "PrecomputeConstants",
            OptimizationKind::FunctionOverheadReduction => "FunctionOverheadReduction",
            OptimizationKind::AlgorithmicChange => "AlgorithmicChange",
            OptimizationKind::Other => "Other",
        }
    }
}

impl fmt::Display for OptimizationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationLabel {
    pub label: OptimizationKind,
    /// The matched phrase; empty for `Other`.
    pub evidence: String,
}

const PHRASES: &[(OptimizationKind, &str)] = &[
    (OptimizationKind::LoopInterchange, r"loop[\s-]+interchang\w*|interchang\w*\s+(of\s+)?(the\s+)?(\w+\s+)?loops|(re-?order\w*|swap\w*)\s+(the\s+)?(\w+\s+)?loops|loop[\s-]+(re-?)?order\w*"),
    (OptimizationKind::LoopFusion, r"loop[\s-]+fusion|(fus\w*|merg\w*|combin\w*|jam\w*)\s+(the\s+)?(two\s+|adjacent\s+|both\s+|multiple\s+)?loops"),
    (OptimizationKind::LoopFission, r"loop[\s-]+(fission|distribution|splitting)|(split\w*|distribut\w*)\s+(the\s+)?(\w+\s+)?loops?\b"),
    (OptimizationKind::LoopTiling, r"loop[\s-]+(tiling|blocking)|\btiling\b|\btiled?\b|cache[\s-]+block\w*|\bblocking\b|\bblock\s+size"),
    (OptimizationKind::LoopUnrolling, r"unroll\w*"),
    (OptimizationKind::FusedMultiplyAdd, r"fused[\s-]+multiply[\s-]+(and[\s-]+)?(add|accumulate)|fus(e|es|ing)\s+(the\s+)?multipl\w*\s+and\s+add\w*|\bfmaf?\b"),
    (OptimizationKind::PrecisionChange, r"(single|reduced|lower|mixed|half)[\s-]+precision|\bdouble\s+to\s+float\b|\bfloat\s+instead\s+of\s+double\b"),
    (OptimizationKind::MathSimplification, r"strength[\s-]+reduction|(simplif\w*|reduc\w*)\s+(the\s+)?(arithmetic|math\w*|expression\w*)|avoid\w*\s+(the\s+)?(expensive\s+)?(division|pow|sqrt)|multiplication\s+by\s+(the\s+)?reciprocal|replac\w*\s+(the\s+)?(division|pow\w*|sqrt)"),
    (OptimizationKind::OmpParallelFor, r"omp\s+parallel\s+for|omp\s+for|parallel\s+for|paralleli[sz]\w*|multi-?thread\w*|openmp"),
    (OptimizationKind::OmpScoping, r"\b(private|firstprivate|lastprivate|shared)\s+(clause|variables?)|\breduction\s*(clause|\()|data[\s-]+(sharing|scoping)|\bcollapse\b|schedule\s*\(|\bschedul\w*\s+(clause|polic\w*)"),
    (OptimizationKind::OmpSimd, r"omp\s+simd|\bsimd\b|vectori[sz]\w*|\bavx\w*|\bsse\d*\b"),
    (OptimizationKind::Prefetch, r"prefetch\w*"),
    (OptimizationKind::MemoryAccessPattern, r"(memory|data|array)[\s-]+(access|layout)[\s-]*(pattern)?s?|spatial[\s-]+locality|contiguous\s+(memory|access\w*)|stride[\s-]?1|unit[\s-]+stride|cache[\s-]+(friendly|efficien\w*|utiliz\w*)|row[\s-]+major|column[\s-]+major|transpos\w*"),
    (OptimizationKind::PrecomputeConstants, r"precomput\w*|pre-comput\w*|hoist\w*|loop[\s-]+invariant|(cach\w*|stor\w*)\s+(the\s+)?(repeated|intermediate)|constant\s+fold\w*|lookup\s+table"),
    (OptimizationKind::FunctionOverheadReduction, r"\binlin\w*|function[\s-]+call\s+overhead|call\s+overhead|reduc\w*\s+(the\s+)?(number\s+of\s+)?function\s+calls"),
    (OptimizationKind::AlgorithmicChange, r"algorithm\w*|different\s+approach|asymptotic\w*|complexity"),
];

static TABLE: LazyLock<Vec<(OptimizationKind, Regex)>> = LazyLock::new(|| {
    PHRASES
        .iter()
        .map(|(k, p)| (*k, Regex::new(&format!("(?i){p}")).expect("phrase table compiles")))
        .collect()
});

/// Matches `explanation` against the phrase table; labels come back in
/// taxonomy order, one per kind, with the first matching phrase as evidence.
pub fn classify_explanation(explanation: &str) -> Vec<OptimizationLabel> {
    let labels: Vec<OptimizationLabel> = TABLE
        .iter()
        .filter_map(|(kind, re)| {
            re.find(explanation).map(|m| OptimizationLabel { label: *kind, evidence: m.as_str().to_string() })
        })
        .collect();
    if labels.is_empty() {
        vec![OptimizationLabel { label: OptimizationKind::Other, evidence: String::new() }]
    } else {
        labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(text: &str) -> Vec<OptimizationKind> {
        classify_explanation(text).into_iter().map(|l| l.label).collect()
    }

    #[test]
    fn single_technique() {
        assert_eq!(kinds("applied loop interchange to improve locality"), [OptimizationKind::LoopInterchange]);
        assert_eq!(kinds("Unrolled the inner loop by 4."), [OptimizationKind::LoopUnrolling]);
    }

    #[test]
    fn empty_text_is_other() {
        let labels = classify_explanation("");
        assert_eq!(labels, [OptimizationLabel { label: OptimizationKind::Other, evidence: String::new() }]);
        assert_eq!(kinds("Here is the code."), [OptimizationKind::Other]);
    }

    #[test]
    fn several_techniques_in_taxonomy_order() {
        assert_eq!(
            kinds("we fuse multiply and add, and parallelize with omp for"),
            [OptimizationKind::FusedMultiplyAdd, OptimizationKind::OmpParallelFor]
        );
        assert_eq!(
            kinds("Loop fission splits the body, then loop fusion merges the two loops again."),
            [OptimizationKind::LoopFusion, OptimizationKind::LoopFission]
        );
    }

    #[test]
    fn matching_ignores_case_and_keeps_evidence() {
        let labels = classify_explanation("Used FUSED MULTIPLY-ADD via fma()");
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].label, OptimizationKind::FusedMultiplyAdd);
        assert_eq!(labels[0].evidence, "FUSED MULTIPLY-ADD");
    }

    proptest! {
        #[test]
        fn other_iff_alone_with_empty_evidence(text in "[a-zA-Z ,.-]{0,80}") {
            let labels = classify_explanation(&text);
            prop_assert!(!labels.is_empty());
            for l in &labels {
                prop_assert_eq!(l.label == OptimizationKind::Other, l.evidence.is_empty());
            }
            if labels.iter().any(|l| l.label == OptimizationKind::Other) {
                prop_assert_eq!(labels.len(), 1);
            }
        }
    }
}
