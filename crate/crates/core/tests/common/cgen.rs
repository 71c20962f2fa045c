//! Random C translation units with known function spans, for checking the
//! patcher against positions recorded while the text is generated.

use proptest::prelude::*;

const RETURN_TYPES: [&str; 5] = ["int", "static int", "long", "static inline long", "unsigned"];

/// Statements that put braces, quotes and function-like text where a
/// naive scanner would trip over them. `@` is replaced by the target name.
const DECOYS: [&str; 9] = [
    "x += 1; /* } { */",
    "const char *s = \"} { @(void) {\";",
    "char c = '{'; (void)c;",
    "// closing } here, @(int x) {",
    "if (x > 2) { x--; }",
    "for (int i = 0; i < 3; i++) { x += i; }",
    "const char *q = \"\\\"}\\\"\"; (void)q;",
    "char d = '\\''; (void)d;",
    "{ int y = x; x = y * 2; }",
];

/// Text placed between definitions.
const SEPARATORS: [&str; 5] = [
    "\n",
    "\n/* decoy: @(void) { } */\n",
    "\n// @(int x) {\n",
    "\nstatic const char *banner_@ = \"@(int) { }\";\n",
    "\n#define LIMIT_@ 4\n",
];

#[derive(Debug, Clone)]
pub struct GeneratedFile {
    pub source: String,
    pub names: Vec<String>,
    /// Byte range of each definition in `source`.
    pub spans: Vec<(usize, usize)>,
    pub target: usize,
    pub replacement: String,
}

impl GeneratedFile {
    /// `source` with the target's definition swapped for `replacement`,
    /// computed from the recorded span.
    pub fn expected(&self) -> String {
        let (s, e) = self.spans[self.target];
        format!("{}{}{}", &self.source[..s], self.replacement, &self.source[e..])
    }

    pub fn definition(&self, i: usize) -> &str {
        let (s, e) = self.spans[i];
        &self.source[s..e]
    }
}

fn definition(ret: &str, name: &str, stmts: &[usize], target: &str) -> String {
    let mut def = format!("{ret} {name}(int x)\n{{\n");
    for &d in stmts {
        def.push_str("    ");
        def.push_str(&DECOYS[d].replace('@', target));
        def.push('\n');
    }
    def.push_str("    return x;\n}");
    def
}

type FnShape = (usize, Vec<usize>, usize);

fn build(shapes: Vec<FnShape>, target: usize, header: usize, new_body: Vec<usize>) -> GeneratedFile {
    let target = target % shapes.len();
    let names: Vec<String> = (0..shapes.len()).map(|i| format!("func_{i}")).collect();
    let target_name = names[target].clone();
    let mut source = SEPARATORS[header].replace('@', &target_name).trim_start().to_string();
    let mut spans = Vec::new();
    for (i, (ret, stmts, sep)) in shapes.iter().enumerate() {
        let def = definition(RETURN_TYPES[*ret], &names[i], stmts, &target_name);
        let start = source.len();
        source.push_str(&def);
        spans.push((start, source.len()));
        source.push('\n');
        source.push_str(&SEPARATORS[*sep].replace('@', &format!("{target_name}_{i}")));
    }
    let ret = RETURN_TYPES[shapes[target].0];
    let replacement = definition(ret, &target_name, &new_body, &target_name);
    GeneratedFile { source, names, spans, target, replacement }
}

pub fn c_file() -> impl Strategy<Value = GeneratedFile> {
    let shape = (0..RETURN_TYPES.len(), prop::collection::vec(0..DECOYS.len(), 0..5), 0..SEPARATORS.len());
    (
        prop::collection::vec(shape, 3..=10),
        any::<usize>(),
        0..SEPARATORS.len(),
        prop::collection::vec(0..DECOYS.len(), 0..6),
    )
        .prop_map(|(shapes, target, header, body)| build(shapes, target, header, body))
}
