//! Minimal namespace-aware XML tree built on `quick-xml` events.
//!
//! Elements remember their byte span in the source text so callers can slice
//! out a subtree verbatim (see [`Element::outer_xml`]).

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

pub const XML_NS: &str = "http://www.w3.org/XML/1998/namespace";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("XML not well-formed at byte {offset}: {message}")]
pub struct XmlError {
    pub offset: u64,
    pub message: String,
}

impl XmlError {
    fn new(offset: u64, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Element(Element),
    Text(String),
}

type NsDecl = (Option<String>, String);

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub qname: String,
    pub prefix: Option<String>,
    pub local: String,
    pub namespace: Option<String>,
    /// Non-namespace attributes as (qualified name, unescaped value).
    pub attrs: Vec<(String, String)>,
    /// Namespace declarations made on this element.
    pub ns_decls: Vec<NsDecl>,
    pub children: Vec<Node>,
    start: usize,
    end: usize,
    /// Bindings in scope at this element (innermost last), including its own.
    scope: Vec<NsDecl>,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    pub fn child(&self, local: &str) -> Option<&Element> {
        self.elements().find(|e| e.local == local)
    }

    pub fn children_named<'a>(&'a self, local: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.elements().filter(move |e| e.local == local)
    }

    /// Concatenated descendant text.
    pub fn text(&self) -> String {
        let mut out = String::new();
        self.collect_text(&mut out);
        out
    }

    fn collect_text(&self, out: &mut String) {
        for n in &self.children {
            match n {
                Node::Text(t) => out.push_str(t),
                Node::Element(e) => e.collect_text(out),
            }
        }
    }

    pub fn has_non_whitespace_text(&self) -> bool {
        self.children
            .iter()
            .any(|n| matches!(n, Node::Text(t) if !t.trim().is_empty()))
    }

    fn resolve(&self, prefix: Option<&str>) -> Option<&str> {
        self.scope
            .iter()
            .rev()
            .find(|(p, _)| p.as_deref() == prefix)
            .map(|(_, uri)| uri.as_str())
            .filter(|uri| !uri.is_empty())
    }

    fn used_prefixes(&self, out: &mut Vec<Option<String>>) {
        if !out.contains(&self.prefix) {
            out.push(self.prefix.clone());
        }
        for (k, _) in &self.attrs {
            if let Some((p, _)) = k.split_once(':') {
                let p = Some(p.to_string());
                if p.as_deref() != Some("xml") && !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        for e in self.elements() {
            e.used_prefixes(out);
        }
    }

    /// The element's source text, with namespace declarations inherited from
    /// ancestors re-declared on its start tag so the slice stands alone.
    pub fn outer_xml(&self, source: &str) -> String {
        let raw = &source[self.start..self.end];
        let mut used = Vec::new();
        self.used_prefixes(&mut used);
        let mut inject = String::new();
        for prefix in used {
            if self.ns_decls.iter().any(|(p, _)| *p == prefix) {
                continue;
            }
            if let Some(uri) = self.resolve(prefix.as_deref()) {
                match &prefix {
                    Some(p) => inject.push_str(&format!(" xmlns:{p}=\"{}\"", escape_attr(uri))),
                    None => inject.push_str(&format!(" xmlns=\"{}\"", escape_attr(uri))),
                }
            }
        }
        if inject.is_empty() {
            return raw.to_string();
        }
        let at = 1 + self.qname.len();
        format!("{}{}{}", &raw[..at], inject, &raw[at..])
    }
}

pub fn escape_text(s: &str) -> String {
    quick_xml::escape::escape(s).into_owned()
}

pub fn escape_attr(s: &str) -> String {
    quick_xml::escape::escape(s).into_owned()
}

fn split_qname(q: &str) -> (Option<String>, String) {
    match q.split_once(':') {
        Some((p, l)) => (Some(p.to_string()), l.to_string()),
        None => (None, q.to_string()),
    }
}

fn open_element(
    reader: &Reader<&[u8]>,
    e: &BytesStart<'_>,
    start: usize,
    parent_scope: &[NsDecl],
) -> Result<Element, XmlError> {
    let offset = start as u64;
    let qname = std::str::from_utf8(e.name().as_ref())
        .map_err(|_| XmlError::new(offset, "element name is not UTF-8"))?
        .to_string();
    if qname.is_empty() {
        return Err(XmlError::new(offset, "empty element name"));
    }
    let mut attrs = Vec::new();
    let mut ns_decls = Vec::new();
    for a in e.attributes() {
        let a = a.map_err(|err| XmlError::new(offset, format!("bad attribute: {err}")))?;
        let key = std::str::from_utf8(a.key.as_ref())
            .map_err(|_| XmlError::new(offset, "attribute name is not UTF-8"))?
            .to_string();
        let value = a
            .decode_and_unescape_value(reader.decoder())
            .map_err(|err| XmlError::new(offset, format!("bad attribute value: {err}")))?
            .into_owned();
        if key == "xmlns" {
            ns_decls.push((None, value));
        } else if let Some(p) = key.strip_prefix("xmlns:") {
            if value.is_empty() {
                return Err(XmlError::new(
                    offset,
                    format!("empty namespace for prefix {p}"),
                ));
            }
            ns_decls.push((Some(p.to_string()), value));
        } else {
            attrs.push((key, value));
        }
    }
    let mut scope = parent_scope.to_vec();
    scope.extend(ns_decls.iter().cloned());
    let (prefix, local) = split_qname(&qname);
    let mut el = Element {
        qname,
        prefix,
        local,
        namespace: None,
        attrs,
        ns_decls,
        children: Vec::new(),
        start,
        end: start,
        scope,
    };
    el.namespace = match el.prefix.as_deref() {
        Some("xml") => Some(XML_NS.to_string()),
        Some(p) => Some(
            el.resolve(Some(p))
                .ok_or_else(|| XmlError::new(offset, format!("unbound namespace prefix {p:?}")))?
                .to_string(),
        ),
        None => el.resolve(None).map(str::to_string),
    };
    for (k, _) in &el.attrs {
        if let Some((p, _)) = k.split_once(':') {
            if p != "xml" && el.resolve(Some(p)).is_none() {
                return Err(XmlError::new(
                    offset,
                    format!("unbound namespace prefix {p:?}"),
                ));
            }
        }
    }
    Ok(el)
}

fn push_text(stack: &mut [Element], text: &str, offset: u64) -> Result<(), XmlError> {
    match stack.last_mut() {
        Some(parent) => {
            if let Some(Node::Text(prev)) = parent.children.last_mut() {
                prev.push_str(text);
            } else {
                parent.children.push(Node::Text(text.to_string()));
            }
            Ok(())
        }
        None if text.trim().is_empty() => Ok(()),
        None => Err(XmlError::new(offset, "text outside the root element")),
    }
}

fn resolve_entity(name: &str) -> Option<&'static str> {
    Some(match name {
        "lt" => "<",
        "gt" => ">",
        "amp" => "&",
        "apos" => "'",
        "quot" => "\"",
        _ => return None,
    })
}

/// Parse a complete document into its root element.
pub fn parse_document(text: &str) -> Result<Element, XmlError> {
    let mut reader = Reader::from_reader(text.as_bytes());
    reader.config_mut().trim_text(false);
    reader.config_mut().check_end_names = true;

    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    loop {
        let before = reader.buffer_position() as usize;
        let event = reader
            .read_event()
            .map_err(|err| XmlError::new(reader.error_position(), err.to_string()))?;
        let after = reader.buffer_position() as usize;
        match event {
            Event::Start(e) | Event::Empty(e) if root.is_some() && stack.is_empty() => {
                let _ = e;
                return Err(XmlError::new(before as u64, "more than one root element"));
            }
            Event::Start(e) => {
                let scope = stack.last().map(|p| p.scope.as_slice()).unwrap_or(&[]);
                let el = open_element(&reader, &e, before, scope)?;
                stack.push(el);
            }
            Event::Empty(e) => {
                let scope = stack.last().map(|p| p.scope.as_slice()).unwrap_or(&[]);
                let mut el = open_element(&reader, &e, before, scope)?;
                el.end = after;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => root = Some(el),
                }
            }
            Event::End(_) => {
                let mut el = stack
                    .pop()
                    .ok_or_else(|| XmlError::new(before as u64, "unexpected end tag"))?;
                el.end = after;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => root = Some(el),
                }
            }
            Event::Text(t) => {
                let s = t
                    .decode()
                    .map_err(|err| XmlError::new(before as u64, err.to_string()))?;
                if s.contains('<') {
                    return Err(XmlError::new(before as u64, "unescaped '<' in text"));
                }
                push_text(&mut stack, &s, before as u64)?;
            }
            Event::CData(c) => {
                if stack.is_empty() {
                    return Err(XmlError::new(
                        before as u64,
                        "CDATA outside the root element",
                    ));
                }
                let s = c
                    .decode()
                    .map_err(|err| XmlError::new(before as u64, err.to_string()))?;
                push_text(&mut stack, &s, before as u64)?;
            }
            Event::GeneralRef(r) => {
                let resolved = if r.is_char_ref() {
                    match r.resolve_char_ref() {
                        Ok(Some(c)) => c.to_string(),
                        _ => {
                            return Err(XmlError::new(before as u64, "invalid character reference"))
                        }
                    }
                } else {
                    let name = r
                        .decode()
                        .map_err(|err| XmlError::new(before as u64, err.to_string()))?;
                    resolve_entity(&name)
                        .ok_or_else(|| {
                            XmlError::new(before as u64, format!("undefined entity &{name};"))
                        })?
                        .to_string()
                };
                push_text(&mut stack, &resolved, before as u64)?;
            }
            Event::Decl(_) if before != 0 || root.is_some() => {
                return Err(XmlError::new(
                    before as u64,
                    "XML declaration not at document start",
                ));
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Eof => break,
        }
    }
    if let Some(open) = stack.last() {
        return Err(XmlError::new(
            text.len() as u64,
            format!("unexpected end of input inside <{}>", open.qname),
        ));
    }
    root.ok_or_else(|| XmlError::new(text.len() as u64, "no root element"))
}
