/// Relation surface forms. `[X]` is the subject, `[Y]` the object; every
/// template ends with the object so decoder-only models can complete it.
pub(crate) const RELATIONS: &[(&str, [&str; 3])] = &[
    ("born-in", ["[X] was born in [Y]", "the birthplace of [X] is [Y]", "[X] is a native of [Y]"]),
    ("capital-of", ["the capital of [X] is [Y]", "[X] has its capital in [Y]", "the seat of government of [X] is [Y]"]),
    ("works-for", ["[X] works for [Y]", "the employer of [X] is [Y]", "[X] is employed by [Y]"]),
    ("member-of", ["[X] is a member of [Y]", "[X] belongs to [Y]", "[X] joined [Y]"]),
    ("leader-of", ["the leader of [X] is [Y]", "[X] is led by [Y]", "the head of [X] is [Y]"]),
    ("located-in", ["[X] is located in [Y]", "[X] can be found in [Y]", "[X] lies in [Y]"]),
    ("founded-by", ["[X] was founded by [Y]", "the founder of [X] is [Y]", "[X] was started by [Y]"]),
    ("plays-for", ["[X] plays for [Y]", "[X] is a player of [Y]", "the team of [X] is [Y]"]),
    ("citizen-of", ["[X] is a citizen of [Y]", "the nationality of [X] is [Y]", "[X] holds a passport of [Y]"]),
    ("spouse-of", ["[X] is married to [Y]", "the spouse of [X] is [Y]", "[X] wed [Y]"]),
    ("owned-by", ["[X] is owned by [Y]", "the owner of [X] is [Y]", "[X] belongs to the company [Y]"]),
    ("studied-at", ["[X] studied at [Y]", "[X] graduated from [Y]", "the alma mater of [X] is [Y]"]),
    ("language-of", ["the official language of [X] is [Y]", "people in [X] speak [Y]", "[X] uses the language [Y]"]),
    ("author-of", ["[X] was written by [Y]", "the author of [X] is [Y]", "[X] is a book by [Y]"]),
    ("coach-of", ["the coach of [X] is [Y]", "[X] is coached by [Y]", "[X] trains under [Y]"]),
    ("ceo-of", ["the chief executive of [X] is [Y]", "[X] is run by [Y]", "[X] is managed by [Y]"]),
    ("currency-of", ["the currency of [X] is [Y]", "[X] pays with [Y]", "money in [X] is called [Y]"]),
    ("headquartered-in", ["[X] is headquartered in [Y]", "the main office of [X] is in [Y]", "[X] has its base in [Y]"]),
    ("developed-by", ["[X] was developed by [Y]", "the developer of [X] is [Y]", "[X] was made by [Y]"]),
    ("president-of", ["the president of [X] is [Y]", "[X] is presided over by [Y]", "the elected head of [X] is [Y]"]),
    ("partner-of", ["[X] is a partner of [Y]", "[X] cooperates with [Y]", "[X] has an alliance with [Y]"]),
    ("genre-of", ["the genre of [X] is [Y]", "[X] is classified as [Y]", "[X] is known for [Y]"]),
    ("died-in", ["[X] died in [Y]", "the place of death of [X] is [Y]", "[X] passed away in [Y]"]),
    ("anthem-of", ["the anthem of [X] is [Y]", "[X] sings the anthem [Y]", "the national song of [X] is [Y]"]),
];

/// Second tokens of two-token entity names.
pub(crate) const NAME_SUFFIXES: &[&str] = &[
    "arden", "belmont", "corvin", "dalton", "ellis", "fairfax", "garrow", "hollis", "ingram", "jarvis", "kendal",
    "lorne", "marlow", "norcross", "oakley", "prescott", "quill", "radley", "stanton", "thorne", "upton", "vance",
    "whitby", "yardley",
];
