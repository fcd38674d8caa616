//! Porter suffix-stripping stemmer for ASCII English tokens.

fn is_consonant(word: &[u8], i: usize) -> bool {
    match word[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => i == 0 || !is_consonant(word, i - 1),
        _ => true,
    }
}

/// The measure m: number of vowel-consonant sequences in word[..len].
fn measure(word: &[u8], len: usize) -> usize {
    let mut m = 0;
    let mut i = 0;
    while i < len && is_consonant(word, i) {
        i += 1;
    }
    loop {
        while i < len && !is_consonant(word, i) {
            i += 1;
        }
        if i >= len {
            return m;
        }
        while i < len && is_consonant(word, i) {
            i += 1;
        }
        m += 1;
    }
}

fn has_vowel(word: &[u8], len: usize) -> bool {
    (0..len).any(|i| !is_consonant(word, i))
}

fn ends_double_consonant(word: &[u8]) -> bool {
    let n = word.len();
    n >= 2 && word[n - 1] == word[n - 2] && is_consonant(word, n - 1)
}

/// cvc test where the final c is not w, x or y.
fn ends_cvc(word: &[u8]) -> bool {
    let n = word.len();
    n >= 3
        && is_consonant(word, n - 3)
        && !is_consonant(word, n - 2)
        && is_consonant(word, n - 1)
        && !matches!(word[n - 1], b'w' | b'x' | b'y')
}

fn ends_with(word: &[u8], suffix: &str) -> bool {
    word.len() >= suffix.len() && &word[word.len() - suffix.len()..] == suffix.as_bytes()
}

struct Stem {
    word: Vec<u8>,
}

impl Stem {
    fn stem_len(&self, suffix: &str) -> usize {
        self.word.len() - suffix.len()
    }

    fn replace(&mut self, suffix: &str, with: &str) {
        let at = self.stem_len(suffix);
        self.word.truncate(at);
        self.word.extend_from_slice(with.as_bytes());
    }

    /// Replace suffix with `with` if measure of the stem is > threshold.
    fn replace_m(&mut self, suffix: &str, with: &str, threshold: usize) -> bool {
        if ends_with(&self.word, suffix) && measure(&self.word, self.stem_len(suffix)) > threshold {
            self.replace(suffix, with);
            true
        } else {
            false
        }
    }

    fn step1a(&mut self) {
        if ends_with(&self.word, "sses") {
            self.replace("sses", "ss");
        } else if ends_with(&self.word, "ies") {
            self.replace("ies", "i");
        } else if !ends_with(&self.word, "ss") && ends_with(&self.word, "s") {
            self.replace("s", "");
        }
    }

    fn step1b(&mut self) {
        if ends_with(&self.word, "eed") {
            if measure(&self.word, self.stem_len("eed")) > 0 {
                self.replace("eed", "ee");
            }
            return;
        }
        let stripped = if ends_with(&self.word, "ed") && has_vowel(&self.word, self.stem_len("ed"))
        {
            self.replace("ed", "");
            true
        } else if ends_with(&self.word, "ing") && has_vowel(&self.word, self.stem_len("ing")) {
            self.replace("ing", "");
            true
        } else {
            false
        };
        if stripped {
            if ends_with(&self.word, "at") || ends_with(&self.word, "bl") || ends_with(&self.word, "iz")
            {
                self.word.push(b'e');
            } else if ends_double_consonant(&self.word)
                && !matches!(self.word[self.word.len() - 1], b'l' | b's' | b'z')
            {
                self.word.pop();
            } else if measure(&self.word, self.word.len()) == 1 && ends_cvc(&self.word) {
                self.word.push(b'e');
            }
        }
    }

    fn step1c(&mut self) {
        if ends_with(&self.word, "y") && has_vowel(&self.word, self.stem_len("y")) {
            let n = self.word.len();
            self.word[n - 1] = b'i';
        }
    }

    fn step2(&mut self) {
        const RULES: &[(&str, &str)] = &[
            ("ational", "ate"),
            ("tional", "tion"),
            ("enci", "ence"),
            ("anci", "ance"),
            ("izer", "ize"),
            ("abli", "able"),
            ("alli", "al"),
            ("entli", "ent"),
            ("eli", "e"),
            ("ousli", "ous"),
            ("ization", "ize"),
            ("ation", "ate"),
            ("ator", "ate"),
            ("alism", "al"),
            ("iveness", "ive"),
            ("fulness", "ful"),
            ("ousness", "ous"),
            ("aliti", "al"),
            ("iviti", "ive"),
            ("biliti", "ble"),
        ];
        for (suffix, with) in RULES {
            if ends_with(&self.word, suffix) {
                self.replace_m(suffix, with, 0);
                return;
            }
        }
    }

    fn step3(&mut self) {
        const RULES: &[(&str, &str)] = &[
            ("icate", "ic"),
            ("ative", ""),
            ("alize", "al"),
            ("iciti", "ic"),
            ("ical", "ic"),
            ("ful", ""),
            ("ness", ""),
        ];
        for (suffix, with) in RULES {
            if ends_with(&self.word, suffix) {
                self.replace_m(suffix, with, 0);
                return;
            }
        }
    }

    fn step4(&mut self) {
        const SUFFIXES: &[&str] = &[
            "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement", "ment", "ent",
            "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
        ];
        for suffix in SUFFIXES {
            if ends_with(&self.word, suffix) {
                let at = self.stem_len(suffix);
                if *suffix == "ion" && !(at > 0 && matches!(self.word[at - 1], b's' | b't')) {
                    return;
                }
                if measure(&self.word, at) > 1 {
                    self.word.truncate(at);
                }
                return;
            }
        }
    }

    fn step5(&mut self) {
        if ends_with(&self.word, "e") {
            let at = self.stem_len("e");
            let m = measure(&self.word, at);
            if m > 1 || (m == 1 && !ends_cvc(&self.word[..at])) {
                self.word.truncate(at);
            }
        }
        if ends_double_consonant(&self.word)
            && self.word[self.word.len() - 1] == b'l'
            && measure(&self.word, self.word.len()) > 1
        {
            self.word.pop();
        }
    }
}

/// Stem a lowercase ASCII token. Tokens shorter than 3 characters pass
/// through unchanged, as in the original algorithm.
pub fn porter_stem(token: &str) -> String {
    debug_assert!(token.is_ascii());
    if token.len() <= 2 {
        return token.to_string();
    }
    let mut s = Stem {
        word: token.as_bytes().to_vec(),
    };
    s.step1a();
    s.step1b();
    s.step1c();
    s.step2();
    s.step3();
    s.step4();
    s.step5();
    String::from_utf8(s.word).expect("stemming preserves ascii")
}
