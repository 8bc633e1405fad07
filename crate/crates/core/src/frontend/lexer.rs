use super::ast::SourceSpan;
use super::{FrontendError, FrontendErrorKind};

#[derive(Clone, Debug, PartialEq)]
pub enum Tok {
    Ident(String),
    Number(String),
    Punct(&'static str),
    Eof,
}

#[derive(Clone, Debug)]
pub struct Token {
    pub tok: Tok,
    pub span: SourceSpan,
}

const PUNCT: &[&str] = &["->", "(", ")", "{", "}", ",", ";", ":", "=", "+", "-", "*", "/", "<", ">"];

pub fn lex(src: &str) -> Result<Vec<Token>, FrontendError> {
    let mut out = Vec::new();
    for (li, line) in src.lines().enumerate() {
        let line_no = li as u32 + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let span = |len: usize| SourceSpan { line: line_no, column: i as u32 + 1, length: len as u32 };
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                out.push(Token {
                    tok: Tok::Ident(text),
                    span: SourceSpan { line: line_no, column: start as u32 + 1, length: (i - start) as u32 },
                });
                continue;
            }
            if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    i += 1;
                    if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                        i += 1;
                    }
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let span = SourceSpan { line: line_no, column: start as u32 + 1, length: (i - start) as u32 };
                if text.parse::<f32>().is_err() {
                    return Err(FrontendError::new(FrontendErrorKind::Lex, span, format!("malformed number `{text}`")));
                }
                out.push(Token { tok: Tok::Number(text), span });
                continue;
            }
            let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
            match PUNCT.iter().find(|p| rest.starts_with(**p)) {
                Some(p) => {
                    out.push(Token { tok: Tok::Punct(p), span: span(p.len()) });
                    i += p.len();
                }
                None => {
                    return Err(FrontendError::new(
                        FrontendErrorKind::Lex,
                        span(1),
                        format!("unexpected character `{c}`"),
                    ))
                }
            }
        }
    }
    let last_line = src.lines().count().max(1) as u32;
    let last_col = src.lines().last().map_or(0, |l| l.chars().count()) as u32 + 1;
    out.push(Token { tok: Tok::Eof, span: SourceSpan { line: last_line, column: last_col, length: 0 } });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_numbers_arrows_and_comments() {
        let toks = lex("x -> 1.5e-3 # trailing\n.25").unwrap();
        let kinds: Vec<Tok> = toks.into_iter().map(|t| t.tok).collect();
        assert_eq!(
            kinds,
            vec![
                Tok::Ident("x".into()),
                Tok::Punct("->"),
                Tok::Number("1.5e-3".into()),
                Tok::Number(".25".into()),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn reports_bad_character_with_span() {
        let err = lex("a = b $ c").unwrap_err();
        assert_eq!(err.span, SourceSpan { line: 1, column: 7, length: 1 });
    }
}
